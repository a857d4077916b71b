//! C ABI over the storyvis tree parser, sub-tree masks, Levi graphs and two
//! closed-form losses.
//!
//! Every fallible function returns an [`SvStatus`]; on failure the message is
//! available from [`sv_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use storyvis::graph::{LeviGraph, TripleStore};
use storyvis::losses::{bbox_loss_mirror, kl_loss};
use storyvis::mask::{MaskOptions, MaskRule, MaskStack};
use storyvis::tensor::{Tape, Tensor};
use storyvis::tree::ConstituencyTree;
use storyvis::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    ShapeError = 4,
    IndexOutOfRange = 5,
    Panic = 6,
}

/// Parsed constituency tree.
pub struct SvTree(ConstituencyTree);

/// Per-layer attention masks for one caption.
pub struct SvMaskStack(MaskStack);

/// Bipartite entity/relation graph.
pub struct SvLeviGraph(LeviGraph);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Failure = (SvStatus, String);

fn status_of(e: &Error) -> SvStatus {
    match e {
        Error::Parse { .. } | Error::Format(_) | Error::Json(_) => SvStatus::ParseError,
        Error::Shape { .. } => SvStatus::ShapeError,
        Error::Index { .. } | Error::TokenOutOfRange { .. } => SvStatus::IndexOutOfRange,
        _ => SvStatus::InvalidArgument,
    }
}

fn core(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> Failure {
    (SvStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SvStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            SvStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SvStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn sv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Free a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a bracketed tree such as `(S (NP (NNP Pororo)) (VP (VBZ smiles)))`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_tree_parse(text: *const c_char, out: *mut *mut SvTree) -> SvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let tree = ConstituencyTree::parse(str_arg(text, "text")?).map_err(core)?;
        *out = Box::into_raw(Box::new(SvTree(tree)));
        Ok(())
    })
}

/// # Safety
/// `tree` must come from [`sv_tree_parse`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sv_tree_free(tree: *mut SvTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_tree_leaf_count(tree: *const SvTree, out: *mut usize) -> SvStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(tree, "tree")?.0.leaf_count();
        Ok(())
    })
}

/// Height of the root; preterminals have height 1.
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_tree_height(tree: *const SvTree, out: *mut usize) -> SvStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(tree, "tree")?.0.height();
        Ok(())
    })
}

/// Height of the lowest common ancestor of leaves `i` and `j`.
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_tree_lca_height(tree: *const SvTree, i: usize, j: usize, out: *mut usize) -> SvStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(tree, "tree")?.0.lca_height(i, j).map_err(core)?;
        Ok(())
    })
}

/// Build `layers` masks of shape `leaves x (memory_slots + leaves)`.
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_stack_build(
    tree: *const SvTree,
    layers: usize,
    memory_slots: usize,
    final_layer_full: bool,
    out: *mut *mut SvMaskStack,
) -> SvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let opts = MaskOptions {
            final_layer_full,
            rule: MaskRule::Subtree,
        };
        let stack = MaskStack::build(&ref_arg(tree, "tree")?.0, layers, memory_slots, opts).map_err(core)?;
        *out = Box::into_raw(Box::new(SvMaskStack(stack)));
        Ok(())
    })
}

/// # Safety
/// `stack` must come from [`sv_mask_stack_build`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_stack_free(stack: *mut SvMaskStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Number of layers and the row/column count of each layer's mask.
///
/// # Safety
/// `stack` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_stack_dims(
    stack: *const SvMaskStack,
    layers: *mut usize,
    rows: *mut usize,
    cols: *mut usize,
) -> SvStatus {
    guard(|| {
        let s = &ref_arg(stack, "stack")?.0;
        *out_arg(layers, "layers")? = s.num_layers();
        *out_arg(rows, "rows")? = s.caption_len;
        *out_arg(cols, "cols")? = s.memory_slots + s.caption_len;
        Ok(())
    })
}

/// Copy layer `layer` (0-based) as row-major 0/1 bytes into `buf`, which
/// must hold exactly `rows * cols` bytes.
///
/// # Safety
/// `stack` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_mask_stack_copy_layer(
    stack: *const SvMaskStack,
    layer: usize,
    buf: *mut u8,
    len: usize,
) -> SvStatus {
    guard(|| {
        let s = &ref_arg(stack, "stack")?.0;
        let m = s.layers.get(layer).ok_or_else(|| {
            (
                SvStatus::IndexOutOfRange,
                format!("layer {layer} out of range (len {})", s.num_layers()),
            )
        })?;
        if len != m.data.len() {
            return Err((
                SvStatus::ShapeError,
                format!("buffer holds {len} bytes, layer needs {}", m.data.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, &v) in dst.iter_mut().zip(&m.data) {
            *d = u8::from(v);
        }
        Ok(())
    })
}

/// Build a Levi graph from tab-separated `subject relation object` lines.
///
/// # Safety
/// `tsv` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_levi_graph_from_tsv(tsv: *const c_char, out: *mut *mut SvLeviGraph) -> SvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let store = TripleStore::parse(str_arg(tsv, "tsv")?).map_err(core)?;
        *out = Box::into_raw(Box::new(SvLeviGraph(LeviGraph::from_triples(&store.triples))));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`sv_levi_graph_from_tsv`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sv_levi_graph_free(graph: *mut SvLeviGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Vertex, entity-vertex and directed base-edge counts.
///
/// # Safety
/// `graph` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_levi_graph_counts(
    graph: *const SvLeviGraph,
    vertices: *mut usize,
    entities: *mut usize,
    edges: *mut usize,
) -> SvStatus {
    guard(|| {
        let g = &ref_arg(graph, "graph")?.0;
        *out_arg(vertices, "vertices")? = g.len();
        *out_arg(entities, "entities")? = g.entity_rows().len();
        *out_arg(edges, "edges")? = g.edges.len();
        Ok(())
    })
}

/// Graph as JSON. Release the string with [`sv_string_free`].
///
/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_levi_graph_to_json(graph: *const SvLeviGraph, out: *mut *mut c_char) -> SvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = ref_arg(graph, "graph")?.0.to_json().to_string();
        let c = CString::new(text).map_err(|_| (SvStatus::InvalidArgument, "JSON contains NUL".to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)` over `n` entries.
///
/// # Safety
/// `mu` and `logvar` must each point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_kl_loss(mu: *const f64, logvar: *const f64, n: usize, out: *mut f64) -> SvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n == 0 {
            return Err((SvStatus::InvalidArgument, "n must be positive".into()));
        }
        let row = |p, what| -> Result<Tensor, Failure> { Tensor::new(vec![1, n], slice_arg(p, n, what)?.to_vec()).map_err(core) };
        let (mu, lv) = (row(mu, "mu")?, row(logvar, "logvar")?);
        let mut tape = Tape::new();
        let (mu, lv) = (tape.constant(mu), tape.constant(lv));
        let kl = kl_loss(&mut tape, mu, lv).map_err(core)?;
        *out = tape.value(kl).item();
        Ok(())
    })
}

/// Mirror-min box loss for `k` boxes given as `x1 y1 x2 y2` rows: the smaller
/// of the L1 distance to the target and to its horizontal mirror, divided by `k`.
///
/// # Safety
/// `pred` and `target` must each point to `4 * k` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_bbox_mirror_loss(pred: *const f64, target: *const f64, k: usize, out: *mut f64) -> SvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if k == 0 {
            return Err((SvStatus::InvalidArgument, "k must be positive".into()));
        }
        let boxes = |p, what| -> Result<Tensor, Failure> {
            Tensor::new(vec![k, 4], slice_arg(p, 4 * k, what)?.to_vec()).map_err(core)
        };
        let (pred, target) = (boxes(pred, "pred")?, boxes(target, "target")?);
        let mut tape = Tape::new();
        let pred = tape.constant(pred);
        let loss = bbox_loss_mirror(&mut tape, pred, &target).map_err(core)?;
        *out = tape.value(loss).item();
        Ok(())
    })
}
