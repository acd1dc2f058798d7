use shardir::ir::WindowDimConfig;

/// Base indices partition `i` reads, by brute force over its outputs.
pub fn exact_requirement(w: &WindowDimConfig, n_in: usize, n_out: usize, parts: usize, i: usize) -> Option<(i64, i64)> {
    let p_out = n_out.div_ceil(parts);
    let (s, b, wd, lo) = (w.stride as i64, w.base_dilation as i64, w.window_dilation as i64, w.padding_low as i64);
    let mut range: Option<(i64, i64)> = None;
    for o in (i * p_out)..((i + 1) * p_out).min(n_out) {
        for k in 0..w.size as i64 {
            let p = o as i64 * s + k * wd - lo;
            if p < 0 || p % b != 0 || p / b >= n_in as i64 {
                continue;
            }
            let x = p / b;
            range = Some(range.map_or((x, x), |(a, z)| (a.min(x), z.max(x))));
        }
    }
    range
}
