//! Central finite-difference gradient checking.
//!
//! The builder closure maps leaf variables to an output of any shape; the
//! checker contracts that output with a fixed random weighting so every
//! output element contributes to the scalar being differentiated.

use rand::{Rng, SeedableRng};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-6)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn scalar_loss<F, E>(build: &F, inputs: &[Tensor], weights: &mut Option<Vec<f64>>, seed: u64) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).map_err(|e| TensorError::Contract(format!("gradient check builder: {e}")))?;
    let n = g.value(out).len();
    let w = weights.get_or_insert_with(|| {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x9e37_79b9);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    let weighted = g.mul_const(out, w.clone())?;
    let loss = g.sum_all(weighted);
    Ok((g, vars, loss))
}

/// Compares tape gradients against central differences with the given
/// step. Builder errors surface as [`TensorError::Contract`].
pub fn check_gradients<F, E>(build: F, inputs: &[Tensor], step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    let mut weights = None;
    let (mut g, vars, loss) = scalar_loss(&build, inputs, &mut weights, seed)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut perturbed = inputs.to_vec();
                perturbed[i].data_mut()[j] += delta;
                let (g, _, loss) = scalar_loss(&build, &perturbed, &mut weights, seed)?;
                Ok(g.value(loss).item())
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            *num = (plus - minus) / (2.0 * step);
        }
        let a = &analytic[i];
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        rel_errors.push(diff / na.max(nn).max(1e-6));
    }
    Ok(GradCheckReport { rel_errors })
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Inputs = Box<dyn Fn(&mut rand::rngs::StdRng) -> Vec<Tensor>>;

/// A named primitive graph with a random-input generator.
pub struct GradCase {
    pub name: &'static str,
    pub build: Build,
    pub inputs: Inputs,
}

impl GradCase {
    fn new(
        name: &'static str,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
        inputs: impl Fn(&mut rand::rngs::StdRng) -> Vec<Tensor> + 'static,
    ) -> Self {
        Self {
            name,
            build: Box::new(build),
            inputs: Box::new(inputs),
        }
    }

    /// Largest relative error over `seeds` random draws.
    pub fn max_rel_error(&self, seeds: u64, step: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let inputs = (self.inputs)(&mut rng);
            let rep = check_gradients(&self.build, &inputs, step, seed)?;
            worst = worst.max(rep.max_rel_error());
        }
        Ok(worst)
    }
}

fn uniform(rng: &mut rand::rngs::StdRng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Distinct values spaced 0.02 apart, so a 1e-3 perturbation never crosses
/// a max-pool tie or a ReLU kink.
fn spread(rng: &mut rand::rngs::StdRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.02 + 0.005).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

/// One case per differentiable primitive family.
pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "matmul/add_bias",
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.add_bias(y, v[2])
            },
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[4, 5]), uniform(r, &[5])],
        ),
        GradCase::new(
            "elementwise",
            |g, v| {
                let a = g.tanh(v[0]);
                let b = g.sigmoid(v[1]);
                let c = g.mul(a, b)?;
                let d = g.sub(c, v[1])?;
                let e = g.exp(d);
                let f = g.add(e, a)?;
                let sq = g.mul(v[1], v[1])?;
                let pos = g.add_scalar(sq, 0.5);
                let l = g.log(pos);
                let s = g.sqrt(pos);
                let rc = g.recip(pos);
                let h = g.add(f, l)?;
                let h = g.add(h, s)?;
                let h = g.add(h, rc)?;
                Ok(g.scale(h, 0.7))
            },
            |r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4])],
        ),
        GradCase::new("leaky_relu", |g, v| Ok(g.leaky_relu(v[0], 0.01)), |r| vec![spread(r, &[3, 5])]),
        GradCase::new(
            "softmax/log_softmax",
            |g, v| {
                let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3).collect();
                let s = g.softmax(v[0], Some(&mask))?;
                let l = g.log_softmax(v[1]);
                g.add(s, l)
            },
            |r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4])],
        ),
        GradCase::new(
            "scalar vars/norm2",
            |g, v| {
                let n = g.norm2(v[1]);
                let r = g.recip(n);
                let y = g.mul_scalar(v[0], r)?;
                let y = g.mul_scalar(y, v[2])?;
                g.add_scalar_var(y, v[3])
            },
            |r| vec![uniform(r, &[2, 3]), uniform(r, &[4]), uniform(r, &[1]), uniform(r, &[1])],
        ),
        GradCase::new(
            "log_add_exp/add_col/mul_col/mul_const",
            |g, v| {
                let l = g.log_add_exp(v[0], v[1])?;
                let a = g.add_col(l, v[2])?;
                let m = g.mul_col(a, v[3])?;
                g.mul_const(m, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect())
            },
            |r| vec![uniform(r, &[3, 4]), uniform(r, &[3, 4]), uniform(r, &[3, 1]), uniform(r, &[3, 1])],
        ),
        GradCase::new(
            "shape plumbing",
            |g, v| {
                let t0 = g.time_step(v[0], 0)?;
                let t2 = g.time_step(v[0], 2)?;
                let c = g.concat(&[t0, t2, v[1]])?;
                let s = g.slice_last(c, 1, 6)?;
                let rep = g.repeat_rows(s, 2)?;
                let st = g.stack_time(&[t2, t0])?;
                let r = g.reshape(rep, &[2, 12])?;
                let st = g.reshape(st, &[2, 8])?;
                let sel = g.select_rows(vec![true, false], t0, t2)?;
                let sel = g.concat(&[sel, st])?;
                g.concat(&[r, sel])
            },
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 2])],
        ),
        GradCase::new(
            "weighted_sum/batch_dot",
            |g, v| {
                let c = g.weighted_sum(v[0], v[1])?;
                let d = g.batch_dot(v[1], v[2])?;
                let c = g.reshape(c, &[2, 3])?;
                g.concat(&[c, d])
            },
            |r| vec![uniform(r, &[2, 4]), uniform(r, &[2, 4, 3]), uniform(r, &[2, 3])],
        ),
        GradCase::new(
            "conv2d",
            |g, v| g.conv2d(v[0], v[1], v[2], (2, 2)),
            |r| vec![uniform(r, &[2, 5, 6, 2]), uniform(r, &[3, 4, 2, 3]), uniform(r, &[3])],
        ),
        GradCase::new(
            "conv1d",
            |g, v| g.conv1d(v[0], v[1], v[2]),
            |r| vec![uniform(r, &[2, 6, 1]), uniform(r, &[7, 1, 3]), uniform(r, &[3])],
        ),
        GradCase::new(
            "maxpool2d/columns_to_sequence",
            |g, v| {
                let p = g.maxpool2d(v[0], (2, 2), (2, 2))?;
                g.columns_to_sequence(p)
            },
            |r| vec![spread(r, &[2, 4, 5, 3])],
        ),
        GradCase::new(
            "lstm_cell",
            |g, v| g.lstm_cell(v[0], v[1]),
            |r| vec![uniform(r, &[2, 12]), uniform(r, &[2, 3])],
        ),
        GradCase::new(
            "embedding/nll_probs/sum_all",
            |g, v| {
                let e = g.embedding(v[0], &[2, 0, 2])?;
                let p = g.softmax(e, None)?;
                let l = g.nll_probs(p, vec![Some(1), None, Some(3)], 1e-12)?;
                let s = g.sum_all(e);
                g.add(l, s)
            },
            |r| vec![uniform(r, &[3, 4])],
        ),
        GradCase::new(
            "dropout",
            |g, v| {
                let mut rng = rand::rngs::StdRng::seed_from_u64(7);
                g.dropout(v[0], 0.5, true, &mut rng)
            },
            |r| vec![uniform(r, &[4, 4])],
        ),
    ]
}
