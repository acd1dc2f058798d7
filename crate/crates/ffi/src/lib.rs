//! C ABI over the partitioner: parse or load a graph, partition it, verify it
//! on the simulated mesh, and query collective costs.
//!
//! Every fallible call returns a [`ShardirStatus`]; on failure the message is
//! available from [`shardir_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shardir::corpus::corpus_graph;
use shardir::cost::collective_cost;
use shardir::ir::{parse_graph, Graph};
use shardir::runtime::DeviceMesh;
use shardir::sharding::propagate;
use shardir::spmd::{partition_graph_with, CollectiveKind, PartitionOptions, SpmdProgram};
use shardir::verify::{verify_graph, VerifyError, VerifyOptions};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardirStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Sharding = 4,
    Partition = 5,
    Runtime = 6,
    InvalidArgument = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardirCollective {
    AllReduce = 0,
    AllGather = 1,
    AllToAll = 2,
    CollectivePermute = 3,
}

impl From<ShardirCollective> for CollectiveKind {
    fn from(c: ShardirCollective) -> Self {
        match c {
            ShardirCollective::AllReduce => CollectiveKind::AllReduce,
            ShardirCollective::AllGather => CollectiveKind::AllGather,
            ShardirCollective::AllToAll => CollectiveKind::AllToAll,
            ShardirCollective::CollectivePermute => CollectiveKind::CollectivePermute,
        }
    }
}

/// Opaque graph handle.
pub struct ShardirGraph {
    graph: Graph,
    options: PartitionOptions,
}

/// Opaque partitioned-program handle.
pub struct ShardirProgram {
    program: SpmdProgram,
    text: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ShardirStatus, msg: impl Into<String>) -> ShardirStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> ShardirStatus) -> ShardirStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ShardirStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, ShardirStatus> {
    if p.is_null() {
        return Err(fail(ShardirStatus::NullArgument, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(ShardirStatus::InvalidUtf8, "string is not UTF-8"))
}

fn verify_status(e: &VerifyError) -> ShardirStatus {
    match e {
        VerifyError::Sharding(_) => ShardirStatus::Sharding,
        VerifyError::Partition(_) => ShardirStatus::Partition,
        VerifyError::Runtime(_) | VerifyError::Interp(_) => ShardirStatus::Runtime,
    }
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn shardir_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses graph text.
///
/// # Safety
/// `text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shardir_graph_parse(text: *const c_char, out: *mut *mut ShardirGraph) -> ShardirStatus {
    guard(|| {
        if out.is_null() {
            return fail(ShardirStatus::NullArgument, "null output pointer");
        }
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_graph(text) {
            Ok(graph) => {
                *out = Box::into_raw(Box::new(ShardirGraph { graph, options: PartitionOptions::default() }));
                ShardirStatus::Ok
            }
            Err(e) => fail(ShardirStatus::Parse, e.to_string()),
        }
    })
}

/// Built-in corpus graph `name` sized for `devices` devices.
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shardir_graph_corpus(name: *const c_char, devices: usize, out: *mut *mut ShardirGraph) -> ShardirStatus {
    guard(|| {
        if out.is_null() {
            return fail(ShardirStatus::NullArgument, "null output pointer");
        }
        let name = match read_str(name) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if devices == 0 {
            return fail(ShardirStatus::InvalidArgument, "devices must be positive");
        }
        match corpus_graph(name, devices) {
            Some(c) => {
                *out = Box::into_raw(Box::new(ShardirGraph { graph: c.graph, options: c.options }));
                ShardirStatus::Ok
            }
            None => fail(ShardirStatus::InvalidArgument, format!("no corpus graph named `{name}`")),
        }
    })
}

/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shardir_graph_num_nodes(graph: *const ShardirGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.len())
}

/// # Safety
/// `graph` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shardir_graph_free(graph: *mut ShardirGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Propagates shardings and partitions for `devices` devices.
///
/// # Safety
/// `graph` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shardir_partition(graph: *const ShardirGraph, devices: usize, out: *mut *mut ShardirProgram) -> ShardirStatus {
    guard(|| {
        let Some(g) = graph.as_ref() else { return fail(ShardirStatus::NullArgument, "null graph") };
        if out.is_null() {
            return fail(ShardirStatus::NullArgument, "null output pointer");
        }
        if devices == 0 {
            return fail(ShardirStatus::InvalidArgument, "devices must be positive");
        }
        let annotated = match propagate(&g.graph, devices) {
            Ok(a) => a,
            Err(e) => return fail(ShardirStatus::Sharding, e.to_string()),
        };
        match partition_graph_with(&annotated, devices, &g.options) {
            Ok(program) => {
                let text = CString::new(program.to_text()).expect("program text has no nul");
                *out = Box::into_raw(Box::new(ShardirProgram { program, text }));
                ShardirStatus::Ok
            }
            Err(e) => fail(ShardirStatus::Partition, e.to_string()),
        }
    })
}

/// # Safety
/// `program` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shardir_program_num_nodes(program: *const ShardirProgram) -> usize {
    program.as_ref().map_or(0, |p| p.program.len())
}

/// # Safety
/// `program` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shardir_program_collective_count(program: *const ShardirProgram, kind: ShardirCollective) -> usize {
    program.as_ref().map_or(0, |p| p.program.count(kind.into()))
}

/// Program text, owned by the handle.
///
/// # Safety
/// `program` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn shardir_program_text(program: *const ShardirProgram) -> *const c_char {
    program.as_ref().map_or(ptr::null(), |p| p.text.as_ptr())
}

/// # Safety
/// `program` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shardir_program_free(program: *mut ShardirProgram) {
    if !program.is_null() {
        drop(Box::from_raw(program));
    }
}

/// Runs the partitioned graph on seeded inputs and writes the largest
/// relative error against the reference interpreter.
///
/// # Safety
/// `graph` must be a live handle and `max_rel_error` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shardir_verify(graph: *const ShardirGraph, devices: usize, seed: u64, max_rel_error: *mut f32) -> ShardirStatus {
    guard(|| {
        let Some(g) = graph.as_ref() else { return fail(ShardirStatus::NullArgument, "null graph") };
        if max_rel_error.is_null() {
            return fail(ShardirStatus::NullArgument, "null output pointer");
        }
        if devices == 0 {
            return fail(ShardirStatus::InvalidArgument, "devices must be positive");
        }
        let opts = VerifyOptions { partition: g.options.clone(), ..VerifyOptions::default() };
        match verify_graph(&g.graph, devices, seed, &opts) {
            Ok(r) => {
                *max_rel_error = r.max_rel_error;
                ShardirStatus::Ok
            }
            Err(e) => fail(verify_status(&e), e.to_string()),
        }
    })
}

/// Modeled time for one collective on the most square mesh of `devices`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shardir_collective_cost(
    kind: ShardirCollective,
    bytes_per_device: f64,
    devices: usize,
    out: *mut f64,
) -> ShardirStatus {
    guard(|| {
        if out.is_null() {
            return fail(ShardirStatus::NullArgument, "null output pointer");
        }
        if devices == 0 || bytes_per_device.is_nan() || bytes_per_device < 0.0 {
            return fail(ShardirStatus::InvalidArgument, "devices must be positive and bytes non-negative");
        }
        match collective_cost(kind.into(), bytes_per_device, devices, &DeviceMesh::for_devices(devices)) {
            Ok(t) => {
                *out = t;
                ShardirStatus::Ok
            }
            Err(e) => fail(ShardirStatus::InvalidArgument, e.to_string()),
        }
    })
}
