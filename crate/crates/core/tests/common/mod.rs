//! Oracles written against the plain definitions, without going through the
//! library's own tree, mask or gradient code.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use storyvis::nn::ParamStore;
use storyvis::tensor::{Tape, Tensor, Var};

/// Tree node as read by [`SimpleTree::parse`].
#[derive(Clone, Debug)]
pub struct Node {
    pub label: String,
    pub parent: Option<usize>,
    pub lo: usize,
    pub hi: usize,
    pub height: usize,
}

/// Minimal bracketed-tree reader. A node whose only child is a bare word is a
/// preterminal of height 1; any other node is one above its tallest child.
#[derive(Clone, Debug)]
pub struct SimpleTree {
    pub nodes: Vec<Node>,
    pub words: Vec<String>,
    /// Preterminal node of each word.
    pub pre: Vec<usize>,
}

impl SimpleTree {
    pub fn parse(text: &str) -> SimpleTree {
        let spaced = text.replace('(', " ( ").replace(')', " ) ");
        let toks: Vec<&str> = spaced.split_whitespace().collect();
        let mut t = SimpleTree {
            nodes: Vec::new(),
            words: Vec::new(),
            pre: Vec::new(),
        };
        let mut pos = 0;
        t.node(&toks, &mut pos, None);
        assert_eq!(pos, toks.len(), "trailing tokens in {text}");
        t
    }

    fn node(&mut self, toks: &[&str], pos: &mut usize, parent: Option<usize>) -> usize {
        assert_eq!(toks[*pos], "(");
        let label = toks[*pos + 1].to_string();
        *pos += 2;
        let id = self.nodes.len();
        self.nodes.push(Node {
            label,
            parent,
            lo: self.words.len(),
            hi: 0,
            height: 1,
        });
        if toks[*pos] != "(" {
            self.words.push(toks[*pos].to_string());
            self.pre.push(id);
            *pos += 1;
        } else {
            let mut h = 0;
            while toks[*pos] == "(" {
                let c = self.node(toks, pos, Some(id));
                h = h.max(self.nodes[c].height);
            }
            self.nodes[id].height = h + 1;
        }
        assert_eq!(toks[*pos], ")");
        *pos += 1;
        self.nodes[id].hi = self.words.len() - 1;
        id
    }

    pub fn height(&self) -> usize {
        self.nodes[0].height
    }

    /// Some node of height at most `layer` covers both leaves.
    pub fn visible(&self, i: usize, j: usize, layer: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| n.height <= layer && n.lo <= i.min(j) && n.hi >= i.max(j))
    }

    /// Labels from the preterminal of `leaf` up to the root.
    pub fn ancestor_labels(&self, leaf: usize) -> Vec<&str> {
        let mut out = Vec::new();
        let mut cur = Some(self.pre[leaf]);
        while let Some(id) = cur {
            out.push(self.nodes[id].label.as_str());
            cur = self.nodes[id].parent;
        }
        out
    }
}

/// Every ordered tree over `n` leaves whose phrase nodes have two or more
/// children, with or without a single unary node on top of each phrase node.
pub fn all_shapes(n: usize) -> Vec<String> {
    fn rec(lo: usize, hi: usize) -> Vec<String> {
        if hi - lo == 1 {
            return vec![format!("(P w{lo})")];
        }
        let mut out = Vec::new();
        for split in splits(lo, hi) {
            let mut combos = vec![String::new()];
            for w in split.windows(2) {
                let kids = rec(w[0], w[1]);
                combos = combos
                    .iter()
                    .flat_map(|c| kids.iter().map(move |k| format!("{c} {k}")))
                    .collect();
            }
            for c in combos {
                let phrase = format!("(X{c})");
                out.push(format!("(U {phrase})"));
                out.push(phrase);
            }
        }
        out
    }
    /// Boundaries of every split of `lo..hi` into at least two parts.
    fn splits(lo: usize, hi: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = vec![lo];
        fn go(pos: usize, hi: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos == hi {
                if cur.len() > 2 {
                    out.push(cur.clone());
                }
                return;
            }
            for next in pos + 1..=hi {
                cur.push(next);
                go(next, hi, cur, out);
                cur.pop();
            }
        }
        go(lo, hi, &mut cur, &mut out);
        out
    }
    rec(0, n)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` between tape gradients of `f` and
/// central differences with step `1e-5`.
pub fn fd_max_rel_error<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> storyvis::Result<Var>,
{
    let value = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let eps = 1e-5;
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for (ei, a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = value(&work);
            work[pi].data_mut()[ei] = orig - eps;
            let minus = value(&work);
            work[pi].data_mut()[ei] = orig;
            let n = (plus - minus) / (2.0 * eps);
            let e = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(if e.is_finite() { e } else { f64::INFINITY });
        }
    }
    worst
}

type Mat = Vec<Vec<f64>>;

fn weights(store: &ParamStore, name: &str) -> Mat {
    let t = store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    add_row(&matmul(x, &weights(store, &format!("{name}.w"))), &weights(store, &format!("{name}.b"))[0])
}

fn layer_norm(store: &ParamStore, name: &str, x: &Mat, eps: f64) -> Mat {
    let g = &weights(store, &format!("{name}.gamma"))[0];
    let b = &weights(store, &format!("{name}.beta"))[0];
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mu) / s * g[j] + b[j]).collect()
        })
        .collect()
}

fn self_attention(store: &ParamStore, name: &str, x: &Mat, heads: usize) -> Mat {
    let q = linear(store, &format!("{name}.q"), x);
    let k = matmul(x, &weights(store, &format!("{name}.k.w")));
    let v = linear(store, &format!("{name}.v"), x);
    let (n, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(store, &format!("{name}.o"), &cat)
}

/// Post-norm transformer encoder over the caption weights stored under
/// `prefix`: input projection, learned positions, then `layers` blocks.
pub fn plain_transformer(store: &ParamStore, prefix: &str, x: &Tensor, layers: usize, heads: usize, eps: f64) -> Tensor {
    let x: Mat = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    let pos = weights(store, &format!("{prefix}.positions"));
    let mut h = add(&linear(store, &format!("{prefix}.input"), &x), &pos[..x.len()].to_vec());
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        let a = self_attention(store, &format!("{p}.attn"), &h, heads);
        let h1 = layer_norm(store, &format!("{p}.ln_attn"), &add(&h, &a), eps);
        let inner = linear(store, &format!("{p}.ffn.inner"), &h1);
        let inner: Mat = inner.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        let f = linear(store, &format!("{p}.ffn.outer"), &inner);
        h = layer_norm(store, &format!("{p}.ln_ffn"), &add(&h1, &f), eps);
    }
    Tensor::from_rows(&h).expect("rectangular")
}

pub fn storyvis() -> Command {
    Command::new(env!("CARGO_BIN_EXE_storyvis"))
}

pub fn run(args: &[&str]) -> Output {
    storyvis().args(args).output().expect("spawn storyvis")
}

/// Relative path to file bytes for every file under `dir`.
pub fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).expect("read dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&p).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Generate a synthetic corpus with the CLI and preprocess it into `dir/packs`.
pub fn synthetic_packs(dir: &Path, stories: usize, seed: u64) -> PathBuf {
    let corpus = dir.join("corpus");
    let packs = dir.join("packs");
    let s = stories.to_string();
    let seed = seed.to_string();
    let o = run(&["gen-synthetic", "--stories", &s, "--seed", &seed, "--out", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "preprocess",
        "--stories",
        corpus.join("stories.jsonl").to_str().unwrap(),
        "--embeddings",
        corpus.join("embeddings.txt").to_str().unwrap(),
        "--triples",
        corpus.join("triples.tsv").to_str().unwrap(),
        "--out",
        packs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    packs
}
