//! Dataset generation: Gaussian cluster tasks with mixed-type labels,
//! symmetric label noise, IID and majority/minority participant splits, and
//! a synthetic surface-EMG-like task with the 12 hand-crafted signal
//! features.
//!
//! Every generator is a pure function of (spec, seed); reruns produce
//! identical datasets. Partitions never share samples.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LabelSpace, LabeledBatch};
use crate::projection::{
    build_hierarchical_q, build_semg_q, build_symmetric_noise_t, LabelSpaceSpec, MatrixRole,
    ProjectionMatrix, SpaceKind,
};

/// Held-out test samples generated per fine class.
pub const TEST_PER_CLASS: usize = 50;

/// Synthesized signal length for the sEMG-like task.
pub const SEMG_SIGNAL_LEN: usize = 2048;

/// Number of features produced by [`extract_semg_features`].
pub const SEMG_FEATURES: usize = 12;

/// WAMP / SSC / ZC threshold.
const ZETA: f64 = 1.0;

/// Severity values live in [0, SEVERITY_MAX].
const SEVERITY_MAX: f64 = 5.0;

/// Everything needed to generate one federated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// Feature dimension (fixed to 12 by the sEMG generator).
    pub d: usize,
    /// Number of fine (desired-space) classes.
    pub k: usize,
    /// Fine-to-coarse label map specification.
    pub space: LabelSpaceSpec,
    /// Clean samples drawn per class for the server pool.
    pub n_server_per_class: usize,
    /// Number of clients.
    pub clients: usize,
    /// Samples per client.
    pub per_client: usize,
    /// Symmetric label-noise level on the server pool.
    pub xi: f64,
    pub seed: u64,
    /// Cluster-separation scale (Gaussian task only).
    pub separation: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::DegenerateSpec("need at least two fine classes".into()));
        }
        if self.n_server_per_class < 1 {
            return Err(Error::DegenerateSpec("need at least one server sample per class".into()));
        }
        if self.clients < 1 {
            return Err(Error::DegenerateSpec("need at least one client".into()));
        }
        if self.per_client < 1 {
            return Err(Error::DegenerateSpec("need at least one sample per client".into()));
        }
        if self.space.k != self.k {
            return Err(Error::DegenerateSpec(format!(
                "label space covers {} fine classes but the task has {}",
                self.space.k, self.k
            )));
        }
        let max_xi = (self.k - 1) as f64 / self.k as f64;
        if !(0.0..max_xi).contains(&self.xi) {
            return Err(Error::DegenerateSpec(format!(
                "xi must lie in [0, {max_xi}), got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// One generated task: server pools (desired-space, possibly noisy labels),
/// client pools (other-space labels), a clean test set, and the two
/// projection matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub spec: SyntheticTaskSpec,
    pub q: ProjectionMatrix,
    pub t: ProjectionMatrix,
    pub server_sets: Vec<LabeledBatch>,
    pub client_sets: Vec<LabeledBatch>,
    pub test_set: LabeledBatch,
}

impl FederatedDataset {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: FederatedDataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let k = self.q.cols();
        let j = self.q.rows();
        for s in &self.server_sets {
            if s.space() != LabelSpace::Desired(k) {
                return Err(Error::ShapeMismatch("server sets must carry desired-space labels".into()));
            }
        }
        for c in &self.client_sets {
            if c.space() != LabelSpace::Other(j) {
                return Err(Error::ShapeMismatch("client sets must carry other-space labels".into()));
            }
        }
        if self.test_set.space() != LabelSpace::Desired(k) {
            return Err(Error::ShapeMismatch("test set must carry desired-space labels".into()));
        }
        Ok(())
    }
}

/// Builds the fine-to-coarse projection from a space specification.
pub fn build_q(space: &LabelSpaceSpec) -> Result<ProjectionMatrix> {
    match &space.kind {
        SpaceKind::Hierarchical(_) => build_hierarchical_q(space),
        SpaceKind::Overlapping(rows) => {
            let mut m = DMatrix::zeros(space.j, space.k);
            for (j, row) in rows.iter().enumerate() {
                if row.len() != space.k {
                    return Err(Error::ShapeMismatch(format!(
                        "overlap row {j} has {} entries, expected {}",
                        row.len(),
                        space.k
                    )));
                }
                for (k, &v) in row.iter().enumerate() {
                    m[(j, k)] = v;
                }
            }
            ProjectionMatrix::new(m, MatrixRole::LabelSpaceMap)
        }
    }
}

/// Cluster means for the Gaussian task: spread on a circle of radius
/// `separation` in the first two feature dimensions (spaced linearly along
/// the only axis when d = 1).
pub fn cluster_means(d: usize, k: usize, separation: f64) -> DMatrix<f64> {
    let mut means = DMatrix::zeros(k, d);
    for c in 0..k {
        if d == 1 {
            means[(c, 0)] = separation * c as f64;
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            means[(c, 0)] = separation * angle.cos();
            means[(c, 1)] = separation * angle.sin();
        }
    }
    means
}

fn sample_cluster_point(
    means: &DMatrix<f64>,
    class: usize,
    rng: &mut ChaCha8Rng,
    out: &mut [f64],
) {
    for (j, slot) in out.iter_mut().enumerate() {
        let eps: f64 = StandardNormal.sample(rng);
        *slot = means[(class, j)] + eps;
    }
}

/// Samples a coarse label for fine class `k` with probabilities
/// proportional to column k of Q.
fn sample_coarse_label(q: &ProjectionMatrix, k: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let total: f64 = (0..q.rows()).map(|j| q.entry(j, k)).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSpec(format!(
            "fine class {k} has no mass in any coarse class"
        )));
    }
    let draw: f64 = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for j in 0..q.rows() {
        acc += q.entry(j, k);
        if draw < acc {
            return Ok(j);
        }
    }
    Ok(q.rows() - 1)
}

fn balanced_class_batch(
    means: &DMatrix<f64>,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, Vec<usize>) {
    let (k, d) = means.shape();
    let n = per_class * k;
    let mut inputs = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for class in 0..k {
        for i in 0..per_class {
            sample_cluster_point(means, class, rng, &mut row);
            let r = class * per_class + i;
            for (j, &v) in row.iter().enumerate() {
                inputs[(r, j)] = v;
            }
            labels.push(class);
        }
    }
    (inputs, labels)
}

/// Generates the Gaussian-cluster mixed-type task: K unit-variance clusters,
/// client samples labeled in the coarse space, server samples labeled in the
/// fine space with symmetric noise at level xi, and a clean balanced test
/// set.
pub fn gen_gaussian_clusters(spec: &SyntheticTaskSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    if spec.separation <= 0.0 {
        return Err(Error::DegenerateSpec(format!(
            "separation must be positive, got {}",
            spec.separation
        )));
    }
    if spec.d < 1 {
        return Err(Error::DegenerateSpec("need at least one feature dimension".into()));
    }
    let q = build_q(&spec.space)?;
    let t = build_symmetric_noise_t(spec.k, spec.xi)?;
    let means = cluster_means(spec.d, spec.k, spec.separation);

    let mut rng_server = crate::rng::stream(spec.seed, "gauss-server", 0);
    let (srv_inputs, srv_clean) = balanced_class_batch(&means, spec.n_server_per_class, &mut rng_server);
    let srv_labels = flip_labels(&srv_clean, &t, crate::rng::derive_seed(spec.seed, "server-noise", 0))?;
    let server = LabeledBatch::new(srv_inputs, srv_labels, LabelSpace::Desired(spec.k))?;

    let mut client_sets = Vec::with_capacity(spec.clients);
    let mut row = vec![0.0; spec.d];
    for c in 0..spec.clients {
        let mut rng = crate::rng::stream(spec.seed, "gauss-client", c as u64);
        let mut inputs = DMatrix::zeros(spec.per_client, spec.d);
        let mut labels = Vec::with_capacity(spec.per_client);
        for i in 0..spec.per_client {
            let fine = rng.gen_range(0..spec.k);
            sample_cluster_point(&means, fine, &mut rng, &mut row);
            for (j, &v) in row.iter().enumerate() {
                inputs[(i, j)] = v;
            }
            labels.push(sample_coarse_label(&q, fine, &mut rng)?);
        }
        client_sets.push(LabeledBatch::new(inputs, labels, LabelSpace::Other(spec.space.j))?);
    }

    let mut rng_test = crate::rng::stream(spec.seed, "gauss-test", 0);
    let (test_inputs, test_labels) = balanced_class_batch(&means, TEST_PER_CLASS, &mut rng_test);
    let test_set = LabeledBatch::new(test_inputs, test_labels, LabelSpace::Desired(spec.k))?;

    Ok(FederatedDataset { spec: spec.clone(), q, t, server_sets: vec![server], client_sets, test_set })
}

/// Resamples each label from its row of the transition matrix `t`.
pub fn flip_labels(labels: &[usize], t: &ProjectionMatrix, seed: u64) -> Result<Vec<usize>> {
    if t.role() != MatrixRole::NoiseMap {
        return Err(Error::ShapeMismatch("label flipping needs a noise map".into()));
    }
    let k = t.rows();
    let mut rng = crate::rng::stream(seed, "flip-labels", 0);
    let mut out = Vec::with_capacity(labels.len());
    for &y in labels {
        if y >= k {
            return Err(Error::ShapeMismatch(format!(
                "label {y} outside the {k}-class transition matrix"
            )));
        }
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut picked = k - 1;
        for j in 0..k {
            acc += t.entry(y, j);
            if draw < acc {
                picked = j;
                break;
            }
        }
        out.push(picked);
    }
    Ok(out)
}

/// Majority fraction targeted for each client's two majority classes, and
/// the bounds the emitted split must satisfy.
const MAJORITY_LO: f64 = 0.15;
const MAJORITY_HI: f64 = 0.25;
const MINORITY_CAP: f64 = 0.08;

fn class_counts(batch: &LabeledBatch) -> Vec<usize> {
    let k = batch.space().cardinality();
    let mut counts = vec![0usize; k];
    for &l in batch.labels() {
        counts[l] += 1;
    }
    counts
}

fn satisfies_noniid_constraints(counts: &[usize], majors: Option<(usize, usize)>) -> bool {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return false;
    }
    let fracs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let in_major = |f: f64| (MAJORITY_LO..=MAJORITY_HI).contains(&f);
    match majors {
        Some((a, b)) => {
            in_major(fracs[a])
                && in_major(fracs[b])
                && fracs
                    .iter()
                    .enumerate()
                    .all(|(k, &f)| k == a || k == b || f < MINORITY_CAP)
        }
        None => {
            let major_count = fracs.iter().filter(|&&f| in_major(f)).count();
            major_count == 2
                && fracs.iter().filter(|&&f| !in_major(f)).all(|&f| f < MINORITY_CAP)
        }
    }
}

/// Splits a pool across `c` clients so that every client has exactly two
/// majority classes (fraction in [0.15, 0.25] each) and all other classes
/// below 0.08. Majority pairs rotate across clients. The union of the
/// emitted batches is exactly the pool.
pub fn split_noniid(pool: &LabeledBatch, c: usize, seed: u64) -> Result<Vec<LabeledBatch>> {
    if c == 0 {
        return Err(Error::InfeasibleSplit("need at least one client".into()));
    }
    let k = pool.space().cardinality();
    let counts = class_counts(pool);
    if c == 1 {
        // A single client inherits the pool; the pool itself must satisfy
        // the fraction constraints.
        if satisfies_noniid_constraints(&counts, None) {
            return Ok(vec![pool.clone()]);
        }
        return Err(Error::InfeasibleSplit(
            "pool class fractions do not satisfy the majority/minority constraints".into(),
        ));
    }
    if k < 9 {
        return Err(Error::InfeasibleSplit(format!(
            "two majority classes at most {MAJORITY_HI} each plus {} minorities below \
             {MINORITY_CAP} cannot cover a {k}-class distribution",
            k.saturating_sub(2)
        )));
    }

    // Aim at 0.2 per majority class; push toward 0.25 when the minority
    // share would otherwise breach the cap.
    let mut f = 0.2;
    let mut m = (1.0 - 2.0 * f) / (k - 2) as f64;
    if m >= MINORITY_CAP - 0.002 {
        m = 0.074;
        f = (1.0 - m * (k - 2) as f64) / 2.0;
        if f > MAJORITY_HI - 0.002 {
            return Err(Error::InfeasibleSplit(format!(
                "no feasible majority fraction for {k} classes"
            )));
        }
    }

    let majors: Vec<(usize, usize)> =
        (0..c).map(|i| ((2 * i) % k, (2 * i + 1) % k)).collect();
    let n: usize = counts.iter().sum();
    let size = n as f64 / c as f64;

    // Real-valued demand per (client, class), scaled per class so columns
    // sum to the pool's class counts, then integerized by largest remainder.
    let mut quota = vec![vec![0usize; k]; c];
    for class in 0..k {
        let target: Vec<f64> = (0..c)
            .map(|i| {
                let is_major = majors[i].0 == class || majors[i].1 == class;
                size * if is_major { f } else { m }
            })
            .collect();
        let scale = counts[class] as f64 / target.iter().sum::<f64>();
        let scaled: Vec<f64> = target.iter().map(|t| t * scale).collect();
        let mut floors: Vec<usize> = scaled.iter().map(|&t| t.floor() as usize).collect();
        let assigned: usize = floors.iter().sum();
        let mut remainders: Vec<(usize, f64)> = scaled
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, t - t.floor()))
            .collect();
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(i, _) in remainders.iter().take(counts[class] - assigned) {
            floors[i] += 1;
        }
        for i in 0..c {
            quota[i][class] = floors[i];
        }
    }

    for (i, client_quota) in quota.iter().enumerate() {
        if !satisfies_noniid_constraints(client_quota, Some(majors[i])) {
            return Err(Error::InfeasibleSplit(format!(
                "client {i} quota violates the fraction constraints (pool too skewed or small)"
            )));
        }
    }

    // Deal actual sample indices: shuffle each class's indices once, then
    // hand out consecutive runs following the quotas.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in pool.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, idx) in by_class.iter_mut().enumerate() {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::stream(seed, "split-noniid", class as u64);
        idx.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; k];
    let mut out = Vec::with_capacity(c);
    for client_quota in &quota {
        let mut idx = Vec::new();
        for class in 0..k {
            let take = client_quota[class];
            idx.extend_from_slice(&by_class[class][cursor[class]..cursor[class] + take]);
            cursor[class] += take;
        }
        idx.sort_unstable();
        out.push(pool.select(&idx));
    }
    Ok(out)
}

/// Splits a pool across `c` clients uniformly at random (sizes differ by at
/// most one sample).
pub fn split_iid(pool: &LabeledBatch, c: usize, seed: u64) -> Result<Vec<LabeledBatch>> {
    if c == 0 {
        return Err(Error::InfeasibleSplit("need at least one client".into()));
    }
    if pool.len() < c {
        return Err(Error::InfeasibleSplit(format!(
            "cannot split {} samples across {c} clients",
            pool.len()
        )));
    }
    use rand::seq::SliceRandom;
    let mut rng = crate::rng::stream(seed, "split-iid", 0);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    let mut out = Vec::with_capacity(c);
    for i in 0..c {
        let mut mine: Vec<usize> = idx.iter().copied().skip(i).step_by(c).collect();
        mine.sort_unstable();
        out.push(pool.select(&mine));
    }
    Ok(out)
}

/// Splits the single server pool into `s` participants, dealing each
/// class's samples round-robin so the parts stay class-balanced.
pub fn split_servers(dataset: &FederatedDataset, s: usize) -> Result<FederatedDataset> {
    if s == 0 {
        return Err(Error::InfeasibleSplit("need at least one server".into()));
    }
    if dataset.server_sets.len() != 1 {
        return Err(Error::InfeasibleSplit(format!(
            "expected one server pool to split, found {}",
            dataset.server_sets.len()
        )));
    }
    let pool = &dataset.server_sets[0];
    if pool.len() < s {
        return Err(Error::InfeasibleSplit(format!(
            "cannot split {} server samples across {s} servers",
            pool.len()
        )));
    }
    if s == 1 {
        return Ok(dataset.clone());
    }
    let k = pool.space().cardinality();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in pool.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); s];
    for idx in &by_class {
        for (pos, &i) in idx.iter().enumerate() {
            parts[pos % s].push(i);
        }
    }
    let mut server_sets = Vec::with_capacity(s);
    for mut part in parts {
        part.sort_unstable();
        if part.is_empty() {
            return Err(Error::InfeasibleSplit("a server part came out empty".into()));
        }
        server_sets.push(pool.select(&part));
    }
    Ok(FederatedDataset { server_sets, ..dataset.clone() })
}

/// Maps a severity in [0, 5] to (desired K-bin label, 3-interval coarse label).
pub fn severity_to_labels(severity: f64, k: usize) -> (usize, usize) {
    let fine = ((severity / SEVERITY_MAX * k as f64) as usize).min(k - 1);
    let coarse = ((severity / (SEVERITY_MAX / 3.0)) as usize).min(2);
    (fine, coarse)
}

/// Synthesizes one noisy oscillatory signal whose amplitude and frequency
/// grow monotonically with severity.
fn synth_signal(severity: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = 0.6 + 0.5 * severity;
    let freq = 30.0 + 24.0 * severity;
    let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let l = SEMG_SIGNAL_LEN as f64;
    (0..SEMG_SIGNAL_LEN)
        .map(|n| {
            let noise: f64 = StandardNormal.sample(rng);
            amp * (2.0 * std::f64::consts::PI * freq * n as f64 / l + phase).sin() + 0.25 * noise
        })
        .collect()
}

/// The 12 signal statistics, in order: MAV, MSV, RMS, VAR, STD, WL, WAMP,
/// LOG, SSC, ZC, MSF, MF. Spectral features use the one-sided DFT power
/// spectrum with frequencies in cycles per record.
pub fn extract_semg_features(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 3 {
        return Err(Error::DegenerateSignal(format!(
            "need at least 3 samples to compute the features, got {n}"
        )));
    }
    let nf = n as f64;
    let mav = signal.iter().map(|x| x.abs()).sum::<f64>() / nf;
    let msv = signal.iter().map(|x| x * x).sum::<f64>() / nf;
    let rms = msv.sqrt();
    let var = signal.iter().map(|x| x * x).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();
    let wl = signal.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
    let wamp = signal
        .windows(2)
        .filter(|w| (w[1] - w[0]).abs() >= ZETA)
        .count() as f64;
    let log = (signal.iter().map(|x| x.abs().max(1e-12).ln()).sum::<f64>() / nf).exp();
    let ssc = signal
        .windows(3)
        .filter(|w| (w[1] - w[0]) * (w[1] - w[2]) >= ZETA)
        .count() as f64;
    let zc = signal
        .windows(2)
        .filter(|w| w[0] * w[1] >= ZETA && (w[0] - w[1]).abs() >= ZETA)
        .count() as f64;

    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bins = n / 2;
    let power: Vec<f64> = (1..=bins).map(|j| buf[j].norm_sqr()).collect();
    let total: f64 = power.iter().sum();
    let (msf, mf) = if total > 0.0 {
        let msf = power
            .iter()
            .enumerate()
            .map(|(i, &p)| (i + 1) as f64 * p)
            .sum::<f64>()
            / total;
        let mut acc = 0.0;
        let mut mf = bins as f64;
        for (i, &p) in power.iter().enumerate() {
            acc += p;
            if acc >= total / 2.0 {
                mf = (i + 1) as f64;
                break;
            }
        }
        (msf, mf)
    } else {
        (0.0, 0.0)
    };

    Ok(vec![mav, msv, rms, var, std, wl, wamp, log, ssc, zc, msf, mf])
}

fn semg_batch_from_severities(
    severities: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let mut inputs = DMatrix::zeros(severities.len(), SEMG_FEATURES);
    for (i, &sev) in severities.iter().enumerate() {
        let features = extract_semg_features(&synth_signal(sev, rng))?;
        for (j, &v) in features.iter().enumerate() {
            inputs[(i, j)] = v;
        }
    }
    Ok(inputs)
}

/// Generates the sEMG-like task: latent severities uniform on [0, 5],
/// band-limited noisy signals, the 12 features, K-bin desired labels on the
/// server/test sides and 3-interval coarse labels on the clients.
pub fn gen_semg_like(spec: &SyntheticTaskSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    if spec.k != 5 && spec.k != 10 {
        return Err(Error::UnsupportedK(format!(
            "the severity-interval label map is defined for K in {{5, 10}}, got {}",
            spec.k
        )));
    }
    let k = spec.k;
    let q = build_semg_q(k)?;
    let t = build_symmetric_noise_t(k, spec.xi)?;
    let bin = SEVERITY_MAX / k as f64;

    // Server pool: n severities per fine bin, clean labels then noise.
    let mut rng_server = crate::rng::stream(spec.seed, "semg-server", 0);
    let mut srv_sev = Vec::with_capacity(spec.n_server_per_class * k);
    let mut srv_clean = Vec::with_capacity(spec.n_server_per_class * k);
    for class in 0..k {
        for _ in 0..spec.n_server_per_class {
            let sev = rng_server.gen_range(class as f64 * bin..(class + 1) as f64 * bin);
            srv_sev.push(sev);
            srv_clean.push(class);
        }
    }
    let srv_inputs = semg_batch_from_severities(&srv_sev, &mut rng_server)?;
    let srv_labels = flip_labels(&srv_clean, &t, crate::rng::derive_seed(spec.seed, "server-noise", 0))?;
    let server = LabeledBatch::new(srv_inputs, srv_labels, LabelSpace::Desired(k))?;

    let mut client_sets = Vec::with_capacity(spec.clients);
    for c in 0..spec.clients {
        let mut rng = crate::rng::stream(spec.seed, "semg-client", c as u64);
        let severities: Vec<f64> =
            (0..spec.per_client).map(|_| rng.gen_range(0.0..SEVERITY_MAX)).collect();
        let inputs = semg_batch_from_severities(&severities, &mut rng)?;
        let labels: Vec<usize> =
            severities.iter().map(|&s| severity_to_labels(s, k).1).collect();
        client_sets.push(LabeledBatch::new(inputs, labels, LabelSpace::Other(3))?);
    }

    let mut rng_test = crate::rng::stream(spec.seed, "semg-test", 0);
    let mut test_sev = Vec::with_capacity(TEST_PER_CLASS * k);
    let mut test_labels = Vec::with_capacity(TEST_PER_CLASS * k);
    for class in 0..k {
        for _ in 0..TEST_PER_CLASS {
            test_sev.push(rng_test.gen_range(class as f64 * bin..(class + 1) as f64 * bin));
            test_labels.push(class);
        }
    }
    let test_inputs = semg_batch_from_severities(&test_sev, &mut rng_test)?;
    let test_set = LabeledBatch::new(test_inputs, test_labels, LabelSpace::Desired(k))?;

    Ok(FederatedDataset { spec: spec.clone(), q, t, server_sets: vec![server], client_sets, test_set })
}
