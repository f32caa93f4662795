//! Finite-difference gradient checks of every VT component on small random
//! problems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::block::{vt_block_forward, VtBlockConfig, VtBlockWeights};
use crate::error::Result;
use crate::projector::{project_tokens, ProjectorWeights};
use crate::tensor::{fd_check, FdReport, Tensor, Var};
use crate::tokenizer::{
    centroid_tokenize, filter_tokenize, kmeans_centroids, pooling_tokenize, recurrent_tokenize, TokenizerKind,
};
use crate::transformer::{token_ffn, token_self_attention};

/// Tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Coordinates sampled per case.
const COORDS: usize = 400;

const N: usize = 2;
const C: usize = 4;
const H: usize = 3;
const W: usize = 3;
const L: usize = 4;
const CT: usize = 5;
const D: usize = 3;

pub struct GradcheckCase {
    pub name: &'static str,
    pub report: FdReport,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRADCHECK_TOL
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.0);
                z * scale
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("valid random tensor")
    }
}

/// Weighted sum so that every output coordinate receives a distinct gradient.
fn probe<'t>(v: &Var<'t, f64>) -> Result<Var<'t, f64>> {
    let weights = Tensor::from_fn(v.shape(), |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.45);
    Ok(v.mul(&v.tape().constant(weights))?.sum())
}

fn block_case(
    g: &mut Gen,
    kind: TokenizerKind,
    c_in: usize,
    eps: f64,
    seed: u64,
) -> Result<FdReport> {
    let cfg = VtBlockConfig { attn_dim: D, proj_dim: D, ..VtBlockConfig::new(c_in, C, CT, L, kind) };
    let mut params: Vec<(&str, Tensor<f64>)> = vec![("x", g.tensor(&[N, c_in, H, W], 1.0))];
    params.push(("t_prev", g.tensor(&[N, L, CT], 0.5)));
    for (name, shape) in cfg.param_shapes() {
        params.push((name, g.tensor(&shape, 0.4)));
    }
    let names: Vec<&str> = params.iter().map(|(n, _)| *n).collect();
    fd_check(
        |_, p| {
            let w = VtBlockWeights::from_lookup(&cfg, |name| {
                let i = names.iter().position(|n| *n == name).expect("weight registered");
                Ok(p[i].clone())
            })?;
            let out = vt_block_forward(&p[0], Some(&p[1]), &cfg, &w)?;
            Ok(probe(&out.features)?.add(&probe(&out.tokens)?)?)
        },
        &params,
        eps,
        COORDS,
        seed,
    )
}

/// A filter block feeding its tokens into a recurrent block.
fn chain_case(g: &mut Gen, eps: f64, seed: u64) -> Result<FdReport> {
    let first = VtBlockConfig { attn_dim: D, proj_dim: D, ..VtBlockConfig::new(3, C, CT, L, TokenizerKind::Filter) };
    let second = VtBlockConfig { attn_dim: D, proj_dim: D, ..VtBlockConfig::new(C, C, CT, L, TokenizerKind::Recurrent) };
    let mut names = vec!["x".to_string()];
    let mut values = vec![g.tensor(&[N, 3, H, W], 1.0)];
    for (prefix, cfg) in [("first", &first), ("second", &second)] {
        for (name, shape) in cfg.param_shapes() {
            names.push(format!("{prefix}.{name}"));
            values.push(g.tensor(&shape, 0.4));
        }
    }
    let params: Vec<(&str, Tensor<f64>)> = names.iter().map(String::as_str).zip(values).collect();
    fd_check(
        |_, p| {
            let lookup = |prefix: &str, cfg: &VtBlockConfig| {
                VtBlockWeights::from_lookup(cfg, |name| {
                    let full = format!("{prefix}.{name}");
                    let i = names.iter().position(|n| *n == full).expect("weight registered");
                    Ok(p[i].clone())
                })
            };
            let a = vt_block_forward(&p[0], None, &first, &lookup("first", &first)?)?;
            let b = vt_block_forward(&a.features, Some(&a.tokens), &second, &lookup("second", &second)?)?;
            Ok(probe(&b.features)?.add(&probe(&b.tokens)?)?)
        },
        &params,
        eps,
        COORDS,
        seed,
    )
}

/// Run every case with central step `eps`.
pub fn run_gradcheck_suite(seed: u64, eps: f64) -> Result<Vec<GradcheckCase>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut cases = Vec::new();

    let x = g.tensor(&[N, C, H, W], 1.0);
    let report = fd_check(
        |_, p| probe(&filter_tokenize(&p[0], &p[1])?.tokens),
        &[("x", x.clone()), ("grouping", g.tensor(&[C, L], 0.5))],
        eps,
        COORDS,
        seed,
    )?;
    cases.push(GradcheckCase { name: "filter tokenizer", report });

    let report = fd_check(
        |_, p| probe(&recurrent_tokenize(&p[0], &p[1], &p[2])?.tokens),
        &[("x", x.clone()), ("t_in", g.tensor(&[N, L, CT], 0.5)), ("token_to_grouping", g.tensor(&[CT, C], 0.5))],
        eps,
        COORDS,
        seed,
    )?;
    cases.push(GradcheckCase { name: "recurrent tokenizer", report });

    let report = fd_check(|_, p| probe(&pooling_tokenize(&p[0], L)?.tokens), &[("x", x.clone())], eps, COORDS, seed)?;
    cases.push(GradcheckCase { name: "pooling tokenizer", report });

    // Centroids are held at their value for the unperturbed input.
    let centroids = kmeans_centroids(&x, L, 10)?;
    let report = fd_check(
        |tape, p| {
            let w_k = tape.constant(centroids.clone());
            probe(&centroid_tokenize(&p[0], &w_k)?.tokens)
        },
        &[("x", x.clone())],
        eps,
        COORDS,
        seed,
    )?;
    cases.push(GradcheckCase { name: "cluster tokenizer", report });

    let t = g.tensor(&[N, L, CT], 1.0);
    let report = fd_check(
        |_, p| probe(&token_self_attention(&p[0], &p[1], &p[2])?.0),
        &[("tokens", t.clone()), ("key", g.tensor(&[CT, D], 0.5)), ("query", g.tensor(&[CT, D], 0.5))],
        eps,
        COORDS,
        seed,
    )?;
    cases.push(GradcheckCase { name: "token self-attention", report });

    let report = fd_check(
        |_, p| probe(&token_ffn(&p[0], &p[1], &p[2])?),
        &[("tokens", t.clone()), ("ffn_in", g.tensor(&[CT, CT], 0.5)), ("ffn_out", g.tensor(&[CT, CT], 0.5))],
        eps,
        COORDS,
        seed,
    )?;
    cases.push(GradcheckCase { name: "token feed-forward", report });

    let report = fd_check(
        |_, p| {
            let w = ProjectorWeights { query: p[2].clone(), key: p[3].clone(), value: p[4].clone() };
            probe(&project_tokens(&p[0], &p[1], &w)?.0)
        },
        &[
            ("x", x),
            ("tokens", t),
            ("query", g.tensor(&[C, D], 0.5)),
            ("key", g.tensor(&[CT, D], 0.5)),
            ("value", g.tensor(&[CT, C], 0.5)),
        ],
        eps,
        COORDS,
        seed,
    )?;
    cases.push(GradcheckCase { name: "projector", report });

    cases.push(GradcheckCase { name: "block (filter)", report: block_case(&mut g, TokenizerKind::Filter, 3, eps, seed)? });
    cases.push(GradcheckCase {
        name: "block (recurrent)",
        report: block_case(&mut g, TokenizerKind::Recurrent, C, eps, seed)?,
    });
    cases.push(GradcheckCase { name: "recurrent chain", report: chain_case(&mut g, eps, seed)? });
    Ok(cases)
}
