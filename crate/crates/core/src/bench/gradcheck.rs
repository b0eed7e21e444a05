//! Central finite-difference checks of every differentiable op, every loss
//! and the end-to-end model.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{mi_transfer_loss, FeaturePair, HeadVars};
use crate::divergence::{divergence_along_classes, voxel_divergence_loss, DivergenceKind, HolderExponents};
use crate::error::Result;
use crate::model::{bind_volumes, init_params, ArchConfig, BoundModel, ModalityMask, MODALITIES};
use crate::segloss::{dice_loss, total_loss_var, LabelVolume};
use crate::tape::{Tape, Var, DIFFERENTIABLE_OPS};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One scalar function of some input tensors to be checked.
pub struct Case {
    pub suite: &'static str,
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: LossFn,
    /// Check at most this many entries per input (all when `None`).
    pub sample: Option<usize>,
}

impl Case {
    pub fn new(
        suite: &'static str,
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            suite,
            name: name.into(),
            inputs,
            f: Box::new(f),
            sample: None,
        }
    }

    pub fn sampled(mut self, n: usize) -> Self {
        self.sample = Some(n);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
    /// Ops recorded while evaluating the case.
    pub ops: Vec<&'static str>,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel < REL_TOL
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

fn eval(f: &LossFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

fn run(case: &Case, rng: &mut impl Rng) -> Result<(f64, usize, Vec<&'static str>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let mut ops: Vec<&'static str> = tape.op_names();
    ops.sort_unstable();
    ops.dedup();
    let grads = tape.backward(out)?;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut probe = case.inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let n = probe[i].numel();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(probe[i].shape()));
        let idx: Vec<usize> = match case.sample {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in idx {
            let x0 = probe[i].data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&case.f, &probe)?;
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&case.f, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok((max_rel, checked, ops))
}

pub fn check_case(case: &Case, rng: &mut impl Rng) -> CaseResult {
    let (max_rel, checked, ops, error) = match run(case, rng) {
        Ok((m, c, o)) => (m, c, o, None),
        Err(e) => (f64::INFINITY, 0, Vec::new(), Some(e.to_string())),
    };
    CaseResult {
        suite: case.suite,
        name: case.name.clone(),
        max_rel,
        checked,
        ops,
        error,
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }

    /// `(suite, max relative error, cases)` in first-seen order.
    pub fn suites(&self) -> Vec<(&'static str, f64, usize)> {
        let mut out: Vec<(&'static str, f64, usize)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|s| s.0 == c.suite) {
                Some(s) => {
                    s.1 = s.1.max(c.max_rel);
                    s.2 += 1;
                }
                None => out.push((c.suite, c.max_rel, 1)),
            }
        }
        out
    }

    /// Registered differentiable ops exercised by at least one case.
    pub fn covered_ops(&self) -> Vec<&'static str> {
        let seen: BTreeSet<&str> = self.cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
        DIFFERENTIABLE_OPS
            .iter()
            .copied()
            .filter(|o| seen.contains(o))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "gradcheck seed {} (step {FD_STEP:e}, tolerance {REL_TOL:e})",
            self.seed
        );
        for c in &self.cases {
            let status = if c.passed() { "ok  " } else { "FAIL" };
            match &c.error {
                Some(e) => {
                    let _ = writeln!(out, "{status} {}/{}: error: {e}", c.suite, c.name);
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{status} {}/{}: max rel {:.3e} over {} entries",
                        c.suite, c.name, c.max_rel, c.checked
                    );
                }
            }
            if !c.passed() && !c.ops.is_empty() {
                let _ = writeln!(out, "     ops: {}", c.ops.join(", "));
            }
        }
        for (suite, m, n) in self.suites() {
            let _ = writeln!(out, "suite {suite}: {n} cases, max rel {m:.3e}");
        }
        let covered = self.covered_ops();
        let _ = writeln!(
            out,
            "coverage: {}/{} differentiable ops",
            covered.len(),
            DIFFERENTIABLE_OPS.len()
        );
        for op in DIFFERENTIABLE_OPS {
            let mark = if covered.contains(op) { "x" } else { " " };
            let _ = writeln!(out, "  [{mark}] {op}");
        }
        let _ = writeln!(out, "{}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

pub fn run_cases(seed: u64, cases: &[Case]) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GradcheckReport {
        seed,
        cases: cases.iter().map(|c| check_case(c, &mut rng)).collect(),
    }
}

/// The full registered suite.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cases = default_cases(seed)?;
    Ok(run_cases(seed, &cases))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Uniform in `[-1, 1)` but at least `0.05` away from every kink.
fn avoiding(rng: &mut impl Rng, shape: &[usize], kinks: &[f64]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > 0.05) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn simplex_columns(rng: &mut impl Rng, classes: usize, voxels: usize) -> Tensor {
    let mut data = vec![0.0; classes * voxels];
    for v in 0..voxels {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..classes {
            data[c * voxels + v] = raw[c] / s;
        }
    }
    Tensor::new(vec![classes, voxels], data).expect("shape matches")
}

/// Scalar probe `Σ w ⊙ y` with fixed weights so the upstream gradient of
/// `y` is non-trivial.
fn probe(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn op_case(
    rng: &mut impl Rng,
    name: &'static str,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let weights = uniform(rng, out_shape, -1.0, 1.0);
    Case::new("ndtensor", name, inputs, move |t, v| {
        let y = f(t, v)?;
        probe(t, y, &weights)
    })
}

fn tensor_cases(rng: &mut impl Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let a = uniform(rng, &[2, 3], -1.0, 1.0);
    let b = uniform(rng, &[1, 3], -1.0, 1.0);
    let pos = uniform(rng, &[1, 3], 0.5, 1.5);
    cases.push(op_case(rng, "add", vec![a.clone(), b.clone()], &[2, 3], |t, v| {
        t.add(v[0], v[1])
    }));
    cases.push(op_case(rng, "sub", vec![a.clone(), b.clone()], &[2, 3], |t, v| {
        t.sub(v[0], v[1])
    }));
    cases.push(op_case(rng, "mul", vec![a.clone(), b.clone()], &[2, 3], |t, v| {
        t.mul(v[0], v[1])
    }));
    cases.push(op_case(rng, "div", vec![a.clone(), pos], &[2, 3], |t, v| {
        t.div(v[0], v[1])
    }));
    let s = Tensor::scalar(0.7);
    cases.push(op_case(
        rng,
        "mul_broadcast_scalar",
        vec![a.clone(), s],
        &[2, 3],
        |t, v| t.mul(v[0], v[1]),
    ));
    cases.push(op_case(rng, "add_scalar", vec![a.clone()], &[2, 3], |t, v| {
        t.add_scalar(v[0], 0.3)
    }));
    cases.push(op_case(rng, "mul_scalar", vec![a.clone()], &[2, 3], |t, v| {
        t.mul_scalar(v[0], -1.7)
    }));
    cases.push(op_case(rng, "exp", vec![a.clone()], &[2, 3], |t, v| t.exp(v[0])));
    let p = uniform(rng, &[2, 3], 0.2, 2.0);
    cases.push(op_case(rng, "log", vec![p.clone()], &[2, 3], |t, v| t.ln(v[0])));
    cases.push(op_case(rng, "pow", vec![p.clone()], &[2, 3], |t, v| t.powf(v[0], 2.5)));
    cases.push(op_case(rng, "pow_integer", vec![a.clone()], &[2, 3], |t, v| {
        t.powf(v[0], 3.0)
    }));
    let z = avoiding(rng, &[3, 4], &[-0.5, 0.5]);
    cases.push(op_case(rng, "clamp", vec![z], &[3, 4], |t, v| t.clamp(v[0], -0.5, 0.5)));
    let zz = avoiding(rng, &[2, 3], &[0.0]);
    cases.push(op_case(rng, "relu", vec![zz.clone()], &[2, 3], |t, v| t.relu(v[0])));
    cases.push(op_case(rng, "abs", vec![zz], &[2, 3], |t, v| t.abs(v[0])));
    let c = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    cases.push(op_case(rng, "sum", vec![c.clone()], &[2, 1, 4], |t, v| {
        t.sum(v[0], &[1])
    }));
    cases.push(op_case(rng, "mean", vec![c.clone()], &[1, 3, 1], |t, v| {
        t.mean(v[0], &[0, 2])
    }));
    cases.push(op_case(rng, "softmax", vec![c.clone()], &[2, 3, 4], |t, v| {
        t.softmax(v[0], 1)
    }));
    let x = uniform(rng, &[2, 4, 4, 4], -1.0, 1.0);
    let w = uniform(rng, &[3, 2, 3, 3, 3], -0.5, 0.5);
    let bias = uniform(rng, &[3], -0.5, 0.5);
    cases.push(op_case(
        rng,
        "conv3d",
        vec![x.clone(), w.clone(), bias],
        &[3, 4, 4, 4],
        |t, v| t.conv3d(v[0], v[1], Some(v[2]), 1, 1),
    ));
    cases.push(op_case(
        rng,
        "conv3d_strided",
        vec![x.clone(), w],
        &[3, 1, 1, 1],
        |t, v| t.conv3d(v[0], v[1], None, 2, 0),
    ));
    let w1 = uniform(rng, &[3, 2, 1, 1, 1], -0.5, 0.5);
    cases.push(op_case(
        rng,
        "conv3d_pointwise",
        vec![x.clone(), w1],
        &[3, 4, 4, 4],
        |t, v| t.conv3d(v[0], v[1], None, 1, 0),
    ));
    cases.push(op_case(rng, "downsample2", vec![x.clone()], &[2, 2, 2, 2], |t, v| {
        t.downsample2(v[0])
    }));
    let small = uniform(rng, &[2, 2, 2, 2], -1.0, 1.0);
    cases.push(op_case(
        rng,
        "upsample_nn2",
        vec![small.clone()],
        &[2, 4, 4, 4],
        |t, v| t.upsample2(v[0]),
    ));
    let g = uniform(rng, &[4, 2, 2, 2], -1.0, 1.0);
    let gain = uniform(rng, &[4], 0.5, 1.5);
    let gb = uniform(rng, &[4], -0.5, 0.5);
    cases.push(op_case(rng, "group_norm", vec![g, gain, gb], &[4, 2, 2, 2], |t, v| {
        t.group_norm(v[0], v[1], v[2], 2, 1e-5)
    }));
    let other = uniform(rng, &[3, 2, 2, 2], -1.0, 1.0);
    cases.push(op_case(rng, "concat", vec![small, other], &[5, 2, 2, 2], |t, v| {
        t.concat(&[v[0], v[1]], 0)
    }));
    cases.push(op_case(rng, "reshape", vec![c], &[4, 6], |t, v| {
        t.reshape(v[0], &[4, 6])
    }));
    cases
}

fn divergence_cases(rng: &mut impl Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let e = HolderExponents::new(1.1)?;
    for kind in DivergenceKind::TABLE_ORDER {
        let logits = uniform(rng, &[4, 2, 2, 2], -2.0, 2.0);
        let labels = simplex_columns(rng, 4, 8).reshape(vec![4, 2, 2, 2])?;
        cases.push(Case::new(
            "divergences",
            format!("voxel_loss/{}", kind.key()),
            vec![logits],
            move |t, v| {
                let q = t.constant(labels.clone());
                voxel_divergence_loss(t, v[0], q, kind, e)
            },
        ));
    }
    for alpha in [1.05, 2.0, 5.0] {
        let e = HolderExponents::new(alpha)?;
        let p = uniform(rng, &[3, 4], 0.05, 1.0);
        let q = uniform(rng, &[3, 4], 0.05, 1.0);
        cases.push(Case::new(
            "divergences",
            format!("holder_pair/alpha={alpha}"),
            vec![p, q],
            move |t, v| {
                let d = divergence_along_classes(t, DivergenceKind::Holder, v[0], v[1], e)?;
                t.sum_all(d)
            },
        ));
    }
    Ok(cases)
}

fn distill_cases(rng: &mut impl Rng) -> Vec<Case> {
    let shapes = [[2usize, 2, 2, 2], [4, 1, 1, 1]];
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in shapes {
        let c = s[0];
        inputs.push(uniform(rng, &s, -1.0, 1.0));
        inputs.push(uniform(rng, &[c, c, 1, 1, 1], -0.5, 0.5));
        inputs.push(uniform(rng, &[c], -0.2, 0.2));
        inputs.push(uniform(rng, &[c], -0.5, 0.5));
        targets.push(uniform(rng, &s, -1.0, 1.0));
    }
    vec![Case::new("distill", "mi_transfer_loss", inputs, move |t, v| {
        let mut heads = Vec::new();
        let mut pairs = Vec::new();
        for (k, target) in targets.iter().enumerate() {
            let b = 4 * k;
            heads.push(HeadVars {
                mu_weight: v[b + 1],
                mu_bias: v[b + 2],
                log_sigma: v[b + 3],
            });
            pairs.push(FeaturePair {
                d_f: t.constant(target.clone()),
                d_m: v[b],
            });
        }
        mi_transfer_loss(t, &[pairs], &heads, &[0.5, 1.0])
    })]
}

fn segloss_cases(rng: &mut impl Rng) -> Result<Vec<Case>> {
    let labels = LabelVolume::new([2, 2, 2], (0..8).map(|_| rng.random_range(0..4u8)).collect())?;
    let one_hot = labels.one_hot(4)?;
    let logits = uniform(rng, &[4, 2, 2, 2], -2.0, 2.0);
    let probs = uniform(rng, &[4, 2, 2, 2], 0.05, 1.0);
    let oh = one_hot.clone();
    let mut cases = vec![
        Case::new("segloss", "dice_loss/softmax", vec![logits], move |t, v| {
            let p = t.softmax(v[0], 0)?;
            let y = t.constant(one_hot.clone());
            dice_loss(t, p, y)
        }),
        Case::new("segloss", "dice_loss/raw", vec![probs], move |t, v| {
            let y = t.constant(oh.clone());
            dice_loss(t, v[0], y)
        }),
    ];
    let parts = vec![Tensor::scalar(0.4), Tensor::scalar(1.3), Tensor::scalar(0.2)];
    cases.push(Case::new("segloss", "total_loss", parts, |t, v| {
        total_loss_var(t, v[0], Some(v[1]), Some(v[2]), 0.7, 1.9)
    }));
    Ok(cases)
}

/// Architecture of the end-to-end check: two levels on a 4³ volume.
pub fn check_arch() -> ArchConfig {
    ArchConfig {
        channels: vec![4, 8],
        classes: 3,
        groups: 2,
    }
}

fn model_cases(seed: u64, rng: &mut impl Rng) -> Result<Vec<Case>> {
    let arch = check_arch();
    let params = init_params(seed, &arch)?;
    let volumes: Vec<Tensor> = (0..MODALITIES)
        .map(|_| uniform(rng, &[1, 4, 4, 4], -1.5, 1.5))
        .collect();
    let labels = LabelVolume::new([4, 4, 4], (0..64).map(|_| rng.random_range(0..3u8)).collect())?;
    let one_hot = labels.one_hot(3)?;
    let smoothed = labels.smoothed_one_hot(3, 0.05)?;
    let mask = ModalityMask::new([true, false, true, true])?;
    let inputs: Vec<Tensor> = params.tensors().to_vec();

    let teacher: Vec<Tensor> = {
        let mut tape = Tape::new();
        let m = params.bind(&mut tape, false);
        let full = ModalityMask::full();
        let vs = bind_volumes(&mut tape, &volumes, full)?;
        let taps = m.encode(&mut tape, &vs, full)?;
        taps.iter().map(|&v| tape.value(v).clone()).collect()
    };

    let (p1, v1, y1) = (params.clone(), volumes.clone(), one_hot.clone());
    let dice_case = Case::new("model", "dice∘forward/4³", inputs.clone(), move |t, v| {
        let model = BoundModel::from_vars(t, &p1, v.to_vec())?;
        let xs = bind_volumes(t, &v1, mask)?;
        let out = model.forward(t, &xs, mask)?;
        let probs = t.softmax(out.logits, 0)?;
        let y = t.constant(y1.clone());
        dice_loss(t, probs, y)
    })
    .sampled(3);

    let (p2, v2) = (params, volumes);
    let e = HolderExponents::new(1.1)?;
    let full_case = Case::new("model", "total_objective/4³", inputs, move |t, v| {
        let model = BoundModel::from_vars(t, &p2, v.to_vec())?;
        let xs = bind_volumes(t, &v2, mask)?;
        let out = model.forward(t, &xs, mask)?;
        let probs = t.softmax(out.logits, 0)?;
        let y = t.constant(one_hot.clone());
        let dice = dice_loss(t, probs, y)?;
        let q = t.constant(smoothed.clone());
        let hd = voxel_divergence_loss(t, out.logits, q, DivergenceKind::Holder, e)?;
        let pairs: Vec<FeaturePair> = teacher
            .iter()
            .zip(&out.taps)
            .map(|(f, &d_m)| FeaturePair {
                d_f: t.constant(f.clone()),
                d_m,
            })
            .collect();
        let mi = mi_transfer_loss(t, &[pairs], &model.heads(), &[0.5, 1.0])?;
        total_loss_var(t, dice, Some(mi), Some(hd), 1.0, 1.0)
    })
    .sampled(3);
    Ok(vec![dice_case, full_case])
}

pub fn default_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = tensor_cases(&mut rng);
    cases.extend(divergence_cases(&mut rng)?);
    cases.extend(distill_cases(&mut rng));
    cases.extend(segloss_cases(&mut rng)?);
    cases.extend(model_cases(seed, &mut rng)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn tensor_suite_passes_and_covers_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cases = tensor_cases(&mut rng);
        let report = run_cases(0, &cases);
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.covered_ops(), DIFFERENTIABLE_OPS.to_vec());
    }
}
