//! Diagnostics over encoder traces: activation factors, sampled Lipschitz
//! bounds, k-NN differential entropy, token distance matrices and
//! residual/gate weight statistics.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Model, TokenBatch};
use crate::param::ModelRng;

/// Token representations of one sample at one layer, `n × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Rows {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape("rows", &[n, d], &[data.len()]));
        }
        Ok(Self { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Per-sample, per-layer representations plus gate weights and residual
/// scalars of the model that produced them.
#[derive(Debug, Clone, Default)]
pub struct TraceBundle {
    pub model: String,
    /// `samples[s][l]` is `X^(l)` of sample `s` without padding rows.
    pub samples: Vec<Vec<Rows>>,
    /// `gates[s][l]` holds `λ` of sample `s` at layer `l + 1`.
    pub gates: Vec<Vec<Vec<f64>>>,
    /// `(layer, branch, α)`.
    pub alphas: Vec<(usize, String, f64)>,
}

impl TraceBundle {
    pub fn new(model: &Model) -> Self {
        Self {
            model: model.tag(),
            alphas: model
                .residual_weights()
                .into_iter()
                .map(|(l, b, a)| (l, b.to_string(), a))
                .collect(),
            ..Self::default()
        }
    }

    /// Appends every sample of one forward pass, dropping padded rows.
    pub fn push(&mut self, batch: &TokenBatch, out: &ForwardOutput) {
        let (b, n) = (batch.batch, batch.len);
        for s in 0..b {
            let keep: Vec<usize> = (0..n).filter(|&i| batch.mask[s * n + i] > 0.0).collect();
            let layers = out
                .trace
                .iter()
                .map(|x| {
                    let d = x.shape()[2];
                    let mut data = Vec::with_capacity(keep.len() * d);
                    for &i in &keep {
                        data.extend_from_slice(&x.data()[(s * n + i) * d..(s * n + i + 1) * d]);
                    }
                    Rows { n: keep.len(), d, data }
                })
                .collect();
            self.samples.push(layers);
            let gates = out
                .gates
                .iter()
                .map(|g| {
                    let e = g.shape()[1];
                    g.data()[s * e..(s + 1) * e].to_vec()
                })
                .collect();
            self.gates.push(gates);
        }
    }

    pub fn layers(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

/// Order statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateInput("cannot summarise an empty sample".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            count: v.len(),
            mean,
            stddev: var.sqrt(),
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationFactor {
    pub summary: Summary,
    /// Pairs skipped because their layer-0 distance was below 1e-12.
    pub excluded: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Ratios `‖X_i^(l) − X_j^(l)‖ / ‖X_i^(0) − X_j^(0)‖` over all samples and
/// token pairs `i < j`.
pub fn activation_factor(bundle: &TraceBundle, l: usize) -> Result<ActivationFactor> {
    if l == 0 || l >= bundle.layers() {
        return Err(Error::Precondition(format!(
            "layer {l} is outside 1..{}",
            bundle.layers()
        )));
    }
    let mut ratios = Vec::new();
    let mut excluded = 0;
    for sample in &bundle.samples {
        let (x0, xl) = (&sample[0], &sample[l]);
        for i in 0..x0.n {
            for j in i + 1..x0.n {
                let base = dist(x0.row(i), x0.row(j));
                if base < 1e-12 {
                    excluded += 1;
                } else {
                    ratios.push(dist(xl.row(i), xl.row(j)) / base);
                }
            }
        }
    }
    if ratios.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "every token pair is degenerate ({excluded} excluded)"
        )));
    }
    Ok(ActivationFactor { summary: Summary::of(&ratios)?, excluded })
}

/// `max ‖f(x) − f(y)‖₂ / ‖x − y‖₂` over sampled pairs. A lower bound on the
/// Lipschitz constant of `f`, nondecreasing in `trials`.
pub fn empirical_activation_bound<F, S>(mut f: F, mut sampler: S, trials: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    S: FnMut(&mut ModelRng) -> Vec<f64>,
{
    if trials < 1000 {
        return Err(Error::Precondition(format!("need at least 1000 trials, got {trials}")));
    }
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..trials {
        let (x, y) = (sampler(&mut rng), sampler(&mut rng));
        let dx = dist(&x, &y);
        if dx == 0.0 {
            continue;
        }
        best = best.max(dist(&f(&x)?, &f(&y)?) / dx);
    }
    Ok(best)
}

pub const ENTROPY_K: usize = 3;
/// Smallest `n·d` a representation needs before its entropy is estimated.
pub const MIN_ENTROPY_VALUES: usize = 50;
const JITTER: f64 = 1e-12;

/// One-dimensional Kozachenko–Leonenko estimate
/// `ψ(n) − ψ(k) + ln 2 + mean(ln ε_i)`, with `ε_i` the distance to the k-th
/// nearest neighbour. Returns the estimate and how many values were
/// jittered apart; fewer than `k + 1` distinct values give `-inf`.
pub fn kl_entropy_1d(values: &[f64], k: usize) -> (f64, usize) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let distinct = 1 + v.windows(2).filter(|w| w[0] != w[1]).count();
    if v.is_empty() || distinct < k + 1 {
        return (f64::NEG_INFINITY, 0);
    }
    // deterministic jitter: the j-th repeat of a value moves up by j·1e-12
    // (relative for large magnitudes)
    let mut jittered = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        for (r, x) in v[i + 1..j].iter_mut().enumerate() {
            *x += (r + 1) as f64 * JITTER * x.abs().max(1.0);
        }
        jittered += j - i - 1;
        i = j;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut sum_ln = 0.0;
    for i in 0..n {
        // k-th nearest neighbour in a sorted line: merge outward
        let (mut lo, mut hi) = (i, i);
        let mut eps = 0.0;
        for _ in 0..k {
            let left = (lo > 0).then(|| v[i] - v[lo - 1]);
            let right = (hi + 1 < n).then(|| v[hi + 1] - v[i]);
            eps = match (left, right) {
                (Some(a), Some(b)) if a <= b => {
                    lo -= 1;
                    a
                }
                (Some(a), None) => {
                    lo -= 1;
                    a
                }
                (_, Some(b)) => {
                    hi += 1;
                    b
                }
                (None, None) => unreachable!("n > k"),
            };
        }
        sum_ln += eps.ln();
    }
    let h = digamma(n as f64) - digamma(k as f64) + std::f64::consts::LN_2 + sum_ln / n as f64;
    (h, jittered)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEstimate {
    /// Mean of the per-row estimates; `-inf` if any row is degenerate.
    pub mean: f64,
    pub degenerate_rows: usize,
    pub jittered: usize,
}

/// Per-token-row 1-D entropy of feature values, averaged over rows.
pub fn differential_entropy(x: &Rows) -> Result<EntropyEstimate> {
    if x.n * x.d < MIN_ENTROPY_VALUES {
        return Err(Error::Precondition(format!(
            "need at least {MIN_ENTROPY_VALUES} values, got {}×{}",
            x.n, x.d
        )));
    }
    let mut total = 0.0;
    let mut degenerate_rows = 0;
    let mut jittered = 0;
    for i in 0..x.n {
        let (h, j) = kl_entropy_1d(x.row(i), ENTROPY_K);
        jittered += j;
        if h == f64::NEG_INFINITY {
            degenerate_rows += 1;
        }
        total += h;
    }
    Ok(EntropyEstimate {
        mean: total / x.n as f64,
        degenerate_rows,
        jittered,
    })
}

/// Sentinel for cosine distances involving a zero row.
pub const COSINE_SENTINEL: f64 = f64::NEG_INFINITY;

/// Euclidean and cosine distance matrices between the selected tokens of
/// one sample, for every layer.
pub fn layer_distance_matrices(sample: &[Rows], tokens: &[usize]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let k = tokens.len();
    sample
        .iter()
        .map(|x| {
            if let Some(&bad) = tokens.iter().find(|&&t| t >= x.n) {
                return Err(Error::Precondition(format!("token {bad} out of range for {} rows", x.n)));
            }
            let mut euc = vec![0.0; k * k];
            let mut cos = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..k {
                    if a == b {
                        continue;
                    }
                    let (u, v) = (x.row(tokens[a]), x.row(tokens[b]));
                    euc[a * k + b] = dist(u, v);
                    let (nu, nv) = (dist(u, &vec![0.0; u.len()]), dist(v, &vec![0.0; v.len()]));
                    cos[a * k + b] = if nu == 0.0 || nv == 0.0 {
                        COSINE_SENTINEL
                    } else {
                        let c = u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() / (nu * nv);
                        1.0 - c.clamp(-1.0, 1.0)
                    };
                }
            }
            Ok((euc, cos))
        })
        .collect()
}

/// One line of analysis output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub model: String,
    pub layer: usize,
    pub metric: String,
    pub statistic: String,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(model: &str, layer: usize, metric: &str, statistic: &str, value: f64) -> Self {
        Self {
            model: model.into(),
            layer,
            metric: metric.into(),
            statistic: statistic.into(),
            value,
        }
    }
}

fn summary_records(model: &str, layer: usize, metric: &str, s: &Summary) -> Vec<MetricsRecord> {
    [
        ("mean", s.mean),
        ("median", s.median),
        ("stddev", s.stddev),
        ("q1", s.q1),
        ("q3", s.q3),
        ("min", s.min),
        ("max", s.max),
        ("count", s.count as f64),
    ]
    .into_iter()
    .map(|(stat, v)| MetricsRecord::new(model, layer, metric, stat, v))
    .collect()
}

/// Residual weights per layer and gate-weight summaries per layer and expert.
pub fn weight_stats(bundle: &TraceBundle) -> Result<Vec<MetricsRecord>> {
    let m = &bundle.model;
    let mut out: Vec<MetricsRecord> = bundle
        .alphas
        .iter()
        .map(|(l, branch, a)| MetricsRecord::new(m, *l, &format!("residual_{branch}"), "value", *a))
        .collect();
    let layers = bundle.gates.first().map_or(0, Vec::len);
    for l in 0..layers {
        let experts = bundle.gates[0][l].len();
        for e in 0..experts {
            let w: Vec<f64> = bundle.gates.iter().map(|g| g[l][e]).collect();
            out.extend(summary_records(m, l + 1, &format!("gate_expert{e}"), &Summary::of(&w)?));
        }
    }
    Ok(out)
}

/// Activation factors (layers ≥ 1) and mean entropy (all layers).
pub fn trace_metrics(bundle: &TraceBundle) -> Result<Vec<MetricsRecord>> {
    let m = &bundle.model;
    let mut out = Vec::new();
    for l in 0..bundle.layers() {
        if l > 0 {
            let af = activation_factor(bundle, l)?;
            out.extend(summary_records(m, l, "activation_factor", &af.summary));
            out.push(MetricsRecord::new(m, l, "activation_factor", "excluded", af.excluded as f64));
        }
        let mut per_sample = Vec::new();
        let (mut degenerate, mut jittered, mut skipped) = (0, 0, 0);
        for s in &bundle.samples {
            if s[l].n * s[l].d < MIN_ENTROPY_VALUES {
                skipped += 1;
                continue;
            }
            let e = differential_entropy(&s[l])?;
            per_sample.push(e.mean);
            degenerate += e.degenerate_rows;
            jittered += e.jittered;
        }
        if !per_sample.is_empty() {
            let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
            out.push(MetricsRecord::new(m, l, "entropy", "mean", mean));
        }
        out.push(MetricsRecord::new(m, l, "entropy", "skipped_samples", skipped as f64));
        out.push(MetricsRecord::new(m, l, "entropy", "degenerate_rows", degenerate as f64));
        out.push(MetricsRecord::new(m, l, "entropy", "jittered", jittered as f64));
    }
    Ok(out)
}

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("model,layer,metric,statistic,value\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.model, r.layer, r.metric, r.statistic, r.value);
    }
    s
}

/// Square matrix CSV with token indices as header and first column.
pub fn matrix_csv(tokens: &[usize], m: &[f64]) -> String {
    let k = tokens.len();
    let mut s = String::from("token");
    for t in tokens {
        let _ = write!(s, ",{t}");
    }
    s.push('\n');
    for a in 0..k {
        let _ = write!(s, "{}", tokens[a]);
        for b in 0..k {
            let _ = write!(s, ",{}", m[a * k + b]);
        }
        s.push('\n');
    }
    s
}

/// Writes `metrics.csv`, `weights.csv` and per-layer distance matrices of
/// the first sample into `dir`.
pub fn write_bundle(bundle: &TraceBundle, dir: &Path, distance_tokens: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, content: String| {
        let p = dir.join(name);
        std::fs::write(&p, content).map_err(|e| Error::io(p, e))
    };
    write("metrics.csv", records_csv(&trace_metrics(bundle)?))?;
    write("weights.csv", records_csv(&weight_stats(bundle)?))?;
    if let Some(sample) = bundle.samples.first() {
        let tokens: Vec<usize> = (0..sample[0].n.min(distance_tokens)).collect();
        for (l, (euc, cos)) in layer_distance_matrices(sample, &tokens)?.iter().enumerate() {
            write(&format!("distance_euclidean_layer{l}.csv"), matrix_csv(&tokens, euc))?;
            write(&format!("distance_cosine_layer{l}.csv"), matrix_csv(&tokens, cos))?;
        }
    }
    Ok(())
}
