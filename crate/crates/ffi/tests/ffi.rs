use std::ffi::{CStr, CString};
use std::ptr;

use storyvis_ffi::*;

const TREE: &str = "(S (NP (NNP Pororo)) (VP (VP (VBZ says) (UH hi)) (CC and) (VP (VBZ smiles))))";

fn last_error() -> String {
    unsafe { CStr::from_ptr(sv_last_error_message()) }.to_string_lossy().into_owned()
}

fn parse(text: &str) -> *mut SvTree {
    let c = CString::new(text).unwrap();
    let mut tree = ptr::null_mut();
    assert_eq!(unsafe { sv_tree_parse(c.as_ptr(), &mut tree) }, SvStatus::Ok);
    assert!(!tree.is_null());
    tree
}

#[test]
fn tree_queries() {
    let tree = parse(TREE);
    let (mut leaves, mut height, mut lca) = (0, 0, 0);
    unsafe {
        assert_eq!(sv_tree_leaf_count(tree, &mut leaves), SvStatus::Ok);
        assert_eq!(sv_tree_height(tree, &mut height), SvStatus::Ok);
        assert_eq!(leaves, 5);
        assert_eq!(height, 4);
        for (i, j, h) in [(0, 0, 1), (1, 2, 2), (2, 4, 3), (0, 4, 4)] {
            assert_eq!(sv_tree_lca_height(tree, i, j, &mut lca), SvStatus::Ok);
            assert_eq!(lca, h, "lca({i}, {j})");
        }
        assert_eq!(sv_tree_lca_height(tree, 0, 5, &mut lca), SvStatus::IndexOutOfRange);
        assert!(!last_error().is_empty());
        sv_tree_free(tree);
    }
}

#[test]
fn parse_errors_set_the_message() {
    let bad = CString::new("(S (NP Pororo").unwrap();
    let mut tree = ptr::null_mut();
    let status = unsafe { sv_tree_parse(bad.as_ptr(), &mut tree) };
    assert_eq!(status, SvStatus::ParseError);
    assert!(tree.is_null());
    assert!(!last_error().is_empty());

    let good = parse("(S (NN x))");
    assert_eq!(last_error(), "");
    unsafe { sv_tree_free(good) };
}

#[test]
fn mask_layers_round_trip() {
    let tree = parse(TREE);
    let mut stack = ptr::null_mut();
    unsafe {
        assert_eq!(sv_mask_stack_build(tree, 4, 2, true, &mut stack), SvStatus::Ok);
        let (mut layers, mut rows, mut cols) = (0, 0, 0);
        assert_eq!(sv_mask_stack_dims(stack, &mut layers, &mut rows, &mut cols), SvStatus::Ok);
        assert_eq!((layers, rows, cols), (4, 5, 7));

        let mut buf = vec![9u8; rows * cols];
        assert_eq!(sv_mask_stack_copy_layer(stack, 0, buf.as_mut_ptr(), buf.len()), SvStatus::Ok);
        for i in 0..rows {
            for j in 0..cols {
                let expected = j < 2 || j - 2 == i;
                assert_eq!(buf[i * cols + j], u8::from(expected), "({i}, {j})");
            }
        }
        assert_eq!(sv_mask_stack_copy_layer(stack, 3, buf.as_mut_ptr(), buf.len()), SvStatus::Ok);
        assert!(buf.iter().all(|&b| b == 1));

        assert_eq!(sv_mask_stack_copy_layer(stack, 4, buf.as_mut_ptr(), buf.len()), SvStatus::IndexOutOfRange);
        assert_eq!(sv_mask_stack_copy_layer(stack, 0, buf.as_mut_ptr(), 3), SvStatus::ShapeError);
        assert_eq!(sv_mask_stack_build(tree, 0, 2, true, &mut stack), SvStatus::InvalidArgument);
        sv_mask_stack_free(stack);
        sv_tree_free(tree);
    }
}

#[test]
fn levi_graph_counts_and_json() {
    let tsv = CString::new("car\tHasA\tdoor\ncar\tAtLocation\tgarage\n").unwrap();
    let mut graph = ptr::null_mut();
    unsafe {
        assert_eq!(sv_levi_graph_from_tsv(tsv.as_ptr(), &mut graph), SvStatus::Ok);
        let (mut v, mut e, mut edges) = (0, 0, 0);
        assert_eq!(sv_levi_graph_counts(graph, &mut v, &mut e, &mut edges), SvStatus::Ok);
        assert_eq!((v, e, edges), (5, 3, 4));

        let mut json = ptr::null_mut();
        assert_eq!(sv_levi_graph_to_json(graph, &mut json), SvStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        sv_string_free(json);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.is_object());
        assert!(text.contains("garage"));
        sv_levi_graph_free(graph);

        let bad = CString::new("only\ttwo\n").unwrap();
        assert_eq!(sv_levi_graph_from_tsv(bad.as_ptr(), &mut graph), SvStatus::ParseError);
        assert!(last_error().contains("3 tab-separated"));
    }
}

#[test]
fn kl_matches_closed_form() {
    let mu = [0.5, -1.0, 0.0];
    let logvar = [0.1, -0.3, 0.0];
    let expected: f64 = 0.5 * mu.iter().zip(&logvar).map(|(m, l): (&f64, &f64)| l.exp() + m * m - 1.0 - l).sum::<f64>();
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(sv_kl_loss(mu.as_ptr(), logvar.as_ptr(), 3, &mut out), SvStatus::Ok);
        assert!((out - expected).abs() < 1e-12, "{out} vs {expected}");
        let zeros = [0.0; 4];
        assert_eq!(sv_kl_loss(zeros.as_ptr(), zeros.as_ptr(), 4, &mut out), SvStatus::Ok);
        assert_eq!(out, 0.0);
        assert_eq!(sv_kl_loss(mu.as_ptr(), logvar.as_ptr(), 0, &mut out), SvStatus::InvalidArgument);
    }
}

#[test]
fn bbox_mirror_is_free() {
    let target = [0.125, 0.25, 0.5, 0.75, 0.0, 0.0, 0.25, 0.5];
    let mirrored = [0.5, 0.25, 0.875, 0.75, 0.75, 0.0, 1.0, 0.5];
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(sv_bbox_mirror_loss(mirrored.as_ptr(), target.as_ptr(), 2, &mut out), SvStatus::Ok);
        assert_eq!(out, 0.0);
        let zeros = [0.0; 8];
        assert_eq!(sv_bbox_mirror_loss(zeros.as_ptr(), target.as_ptr(), 2, &mut out), SvStatus::Ok);
        // direct: (0.125+0.25+0.5+0.75 + 0+0+0.25+0.5) / 2; mirrored is larger
        assert!((out - 2.375 / 2.0).abs() < 1e-12, "{out}");
    }
}

#[test]
fn null_pointers_are_rejected() {
    let mut n = 0;
    let mut out = 0.0;
    let mut tree = ptr::null_mut();
    unsafe {
        assert_eq!(sv_tree_parse(ptr::null(), &mut tree), SvStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(sv_tree_leaf_count(ptr::null(), &mut n), SvStatus::NullPointer);
        let t = parse("(S (NN x))");
        assert_eq!(sv_tree_leaf_count(t, ptr::null_mut()), SvStatus::NullPointer);
        sv_tree_free(t);
        assert_eq!(sv_kl_loss(ptr::null(), ptr::null(), 2, &mut out), SvStatus::NullPointer);
        assert_eq!(sv_mask_stack_dims(ptr::null(), &mut n, &mut n, &mut n), SvStatus::NullPointer);
        sv_tree_free(ptr::null_mut());
        sv_mask_stack_free(ptr::null_mut());
        sv_levi_graph_free(ptr::null_mut());
        sv_string_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/storyvis.h")).unwrap();
    for name in [
        "sv_last_error_message",
        "sv_version",
        "sv_string_free",
        "sv_tree_parse",
        "sv_tree_free",
        "sv_tree_leaf_count",
        "sv_tree_height",
        "sv_tree_lca_height",
        "sv_mask_stack_build",
        "sv_mask_stack_free",
        "sv_mask_stack_dims",
        "sv_mask_stack_copy_layer",
        "sv_levi_graph_from_tsv",
        "sv_levi_graph_free",
        "sv_levi_graph_counts",
        "sv_levi_graph_to_json",
        "sv_kl_loss",
        "sv_bbox_mirror_loss",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct SvTree SvTree;"));
    assert!(header.contains("SV_STATUS_NULL_POINTER = 1"));
}
