//! Central finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit with h = 1e-5. The numeric side only ever evaluates the
//! forward pass, so it stays independent of the backward implementation it
//! checks. Comparison metric per element: |a - n| / max(1, |a|, |n|).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ops::{PadMode, Pointwise};
use crate::tensor::{Graph, Mode, ParamStore, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(name: &str, max_err: f64, tol: f64) -> Self {
        Self { name: name.to_string(), max_err, tol, pass: max_err <= tol }
    }
}

/// Check gradients of a scalar-valued builder with respect to every
/// parameter in `store`. `corrupt` deliberately perturbs the analytic
/// gradients when it matches `name` (negative-control hook).
pub fn check_params(
    name: &str,
    store: &mut ParamStore<f64>,
    build: impl Fn(&mut Graph<'_, f64>) -> Result<Var>,
    corrupt: Option<&str>,
) -> Result<CheckReport> {
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store, Mode::Train);
        let loss = build(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .map(|(id, e)| {
                grads
                    .param(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; e.value.numel()])
            })
            .collect()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Eval);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut max_err = 0.0f64;
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..store.value(id).numel() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let f_plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let f_minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let mut a = analytic[i][j];
            if corrupt == Some(name) {
                a = a * 1.1 + 1e-2;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(CheckReport::new(name, max_err, FD_TOL))
}

/// Check gradients with respect to explicit input tensors (no parameters).
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    corrupt: Option<&str>,
) -> Result<CheckReport> {
    let store = ParamStore::new();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(&store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads.wrt(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(&store, Mode::Eval);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let f_plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let f_minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let mut a = analytic[i][j];
            if corrupt == Some(name) {
                a = a * 1.1 + 1e-2;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(CheckReport::new(name, max_err, FD_TOL))
}

fn rng_for(name: &str) -> ChaCha8Rng {
    let mut seed = 0u64;
    for b in name.bytes() {
        seed = seed.wrapping_mul(131).wrapping_add(b as u64);
    }
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -2.0, 2.0, rng)
}

/// Weighted-sum loss so every output element gets a distinct gradient path.
fn weighted_loss(
    g: &mut Graph<'_, f64>,
    out: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let w = g.input(Tensor::rand_uniform(g.shape(out).to_vec(), -1.0, 1.0, rng));
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Finite-difference checks for every differentiable tensor op, on random
/// shapes with extents <= 8.
pub fn suite_tensor(corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    macro_rules! chk {
        ($name:expr, $shapes:expr, $build:expr) => {{
            let mut rng = rng_for($name);
            let inputs: Vec<Tensor<f64>> =
                $shapes.iter().map(|s: &&[usize]| rand_t(s, &mut rng)).collect();
            let loss_rng = rng_for(concat!($name, ".loss"));
            #[allow(clippy::redundant_closure_call)]
            let rep = check_inputs(
                $name,
                &inputs,
                |g, v| {
                    let out = ($build)(g, v)?;
                    weighted_loss(g, out, &mut loss_rng.clone())
                },
                corrupt,
            )?;
            reports.push(rep);
        }};
    }

    chk!("add", [&[2usize, 3, 4][..], &[2, 3, 4][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .add(v[0], v[1]));
    chk!("mul", [&[2usize, 3, 4][..], &[2, 3, 4][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .mul(v[0], v[1]));
    chk!("scale", [&[3usize, 5][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g.scale(v[0], -1.7));
    for (label, mode) in [
        ("pointwise.relu", Pointwise::Relu),
        ("pointwise.silu", Pointwise::Silu),
        ("pointwise.sigmoid", Pointwise::Sigmoid),
        ("pointwise.softplus", Pointwise::Softplus),
        ("pointwise.exp", Pointwise::Exp),
    ] {
        let mut rng = rng_for(label);
        let x = rand_t(&[2, 7], &mut rng);
        let loss_rng = rng_for("pw.loss");
        let rep = check_inputs(
            label,
            &[x],
            |g, v| {
                let out = g.pointwise(v[0], mode)?;
                weighted_loss(g, out, &mut loss_rng.clone())
            },
            corrupt,
        )?;
        reports.push(rep);
    }
    chk!(
        "linear",
        [&[2usize, 4, 3][..], &[5usize, 3][..], &[5usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.linear(v[0], v[1], Some(v[2]))
    );
    chk!(
        "conv1d.causal",
        [&[2usize, 3, 6][..], &[4usize, 3, 3][..], &[4usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.conv1d(v[0], v[1], Some(v[2]), 1, PadMode::Causal)
    );
    chk!(
        "conv1d.same",
        [&[2usize, 2, 5][..], &[3usize, 2, 3][..], &[3usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.conv1d(v[0], v[1], Some(v[2]), 1, PadMode::Same)
    );
    chk!(
        "conv1d.depthwise",
        [&[2usize, 4, 6][..], &[4usize, 1, 2][..], &[4usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.conv1d(v[0], v[1], Some(v[2]), 4, PadMode::Causal)
    );
    chk!(
        "layer_norm",
        [&[2usize, 5, 3][..], &[5usize][..], &[5usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.layer_norm_channels(v[0], v[1], v[2], 1e-5)
    );
    chk!(
        "affine_channels",
        [&[2usize, 4, 3][..], &[4usize][..], &[4usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.affine_channels(v[0], v[1], v[2])
    );
    chk!(
        "mul_gate",
        [&[2usize, 3, 5][..], &[2usize, 3, 1][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.mul_gate(v[0], v[1])
    );
    chk!("expand_last", [&[2usize, 3, 1][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .expand_last(v[0], 4));
    chk!(
        "add_bias_last",
        [&[2usize, 3, 4][..], &[4usize][..]],
        |g: &mut Graph<'_, f64>, v: &[Var]| g.add_bias_last(v[0], v[1])
    );
    chk!("max_pool", [&[2usize, 3, 7][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .max_pool_k3s2p1(v[0]));
    chk!("adaptive_avg_pool", [&[2usize, 3, 7][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .adaptive_avg_pool(v[0], 3));
    chk!("mean_time", [&[2usize, 3, 5][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g.mean_time(v[0]));
    chk!("flip_axis1", [&[2usize, 4, 3][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .flip_axis(v[0], 1));
    chk!("flip_axis2", [&[2usize, 4, 3][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .flip_axis(v[0], 2));
    chk!("transpose12", [&[2usize, 3, 4][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .transpose12(v[0]));
    chk!("chunk2.concat2", [&[2usize, 4, 3][..]], |g: &mut Graph<'_, f64>, v: &[Var]| {
        let (a, b) = g.chunk2(v[0], 1)?;
        let b2 = g.scale(b, 2.0)?;
        g.concat2(a, b2, 1)
    });
    chk!("tile_last", [&[2usize, 3, 2][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g
        .tile_last(v[0], 3));
    chk!("sum_all", [&[3usize, 4][..]], |g: &mut Graph<'_, f64>, v: &[Var]| g.sum_all(v[0]));

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_suite_passes() {
        let reports = suite_tensor(None).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.pass, "{} failed: max rel err {:.3e} > {:.0e}", r.name, r.max_err, r.tol);
        }
    }

    #[test]
    fn corrupt_hook_fails_named_op() {
        let reports = suite_tensor(Some("linear")).unwrap();
        let linear = reports.iter().find(|r| r.name == "linear").unwrap();
        assert!(!linear.pass, "corrupted op should fail");
        for r in reports.iter().filter(|r| r.name != "linear") {
            assert!(r.pass, "only the corrupted op should fail, {} also failed", r.name);
        }
    }

    #[test]
    fn random_composite_graph_matches_fd() {
        // A deeper random composition exercising chained backward closures.
        let mut rng = rng_for("composite");
        let x = rand_t(&[2, 4, 6], &mut rng);
        let w = rand_t(&[4, 1, 3], &mut rng);
        let gamma = rand_t(&[4], &mut rng);
        let beta = rand_t(&[4], &mut rng);
        let loss_rng = rng_for("composite.loss");
        let rep = check_inputs(
            "composite",
            &[x, w, gamma, beta],
            |g, v| {
                let c = g.conv1d(v[0], v[1], None, 4, PadMode::Causal)?;
                let s = g.pointwise(c, Pointwise::Silu)?;
                let n = g.layer_norm_channels(s, v[2], v[3], 1e-5)?;
                let p = g.max_pool_k3s2p1(n)?;
                let m = g.mean_time(p)?;
                weighted_loss(g, m, &mut loss_rng.clone())
            },
            None,
        )
        .unwrap();
        assert!(rep.pass, "composite graph FD mismatch: {:.3e}", rep.max_err);
    }
}
