use std::io::{self, Read, Write};

use super::shape::Shape;

/// Dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorValue {
    pub shape: Shape,
    pub data: Vec<f32>,
}

const MAGIC: &[u8; 4] = b"SHRD";

impl TensorValue {
    pub fn new(shape: impl Into<Shape>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.num_elements(), data.len(), "data length does not match shape {shape}");
        TensorValue { shape, data }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        let n = shape.num_elements();
        TensorValue { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.num_elements();
        TensorValue { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        TensorValue { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(&[usize]) -> f32) -> Self {
        let shape = shape.into();
        let data = super::shape::IndexIter::new(&shape).map(|idx| f(&idx)).collect();
        TensorValue { shape, data }
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.rank());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(self.shape.dims()).enumerate() {
            debug_assert!(ix < d, "index {index:?} out of bounds at dim {i}");
            off = off * d + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn as_scalar(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "not a single-element tensor");
        self.data[0]
    }

    /// Copies the hyper-rectangle `[start, start+extent)` out of `self`.
    pub fn slice_block(&self, start: &[usize], extent: &[usize]) -> TensorValue {
        TensorValue::from_fn(extent.to_vec(), |idx| {
            let src: Vec<usize> = idx.iter().zip(start).map(|(i, s)| i + s).collect();
            self.get(&src)
        })
    }

    /// Writes `block` into `self` at `start`.
    pub fn write_block(&mut self, start: &[usize], block: &TensorValue) {
        for idx in super::shape::IndexIter::new(&block.shape) {
            let dst: Vec<usize> = idx.iter().zip(start).map(|(i, s)| i + s).collect();
            let v = block.get(&idx);
            self.set(&dst, v);
        }
    }

    /// Writes the binary tensor format: `SHRD`, u32 rank, u32 dims, f32 LE data.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.rank() as u32).to_le_bytes())?;
        for &d in self.shape.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * (self.shape.rank() + self.data.len()));
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_binary<R: Read>(mut r: R) -> io::Result<TensorValue> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad tensor magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let shape = Shape(dims);
        let mut data = Vec::with_capacity(shape.num_elements());
        for _ in 0..shape.num_elements() {
            r.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word));
        }
        Ok(TensorValue { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout_is_fixed() {
        let t = TensorValue::new([2], vec![1.0, -2.5]);
        let bytes = t.to_binary();
        assert_eq!(&bytes[..4], b"SHRD");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20);
        assert_eq!(TensorValue::read_binary(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(TensorValue::read_binary(&b"NOPE\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn block_copy() {
        let t = TensorValue::from_fn([3, 4], |i| (i[0] * 4 + i[1]) as f32);
        let b = t.slice_block(&[1, 2], &[2, 2]);
        assert_eq!(b.data, vec![6.0, 7.0, 10.0, 11.0]);
        let mut z = TensorValue::zeros([3, 4]);
        z.write_block(&[1, 2], &b);
        assert_eq!(z.get(&[2, 3]), 11.0);
    }
}
