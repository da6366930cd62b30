//! Three-branch convolutional embedding network.
//!
//! Each clip enters as three representations (8 ms STFT, 256 ms STFT and the
//! whole-signal DFT). Every representation is average-pooled onto a fixed
//! grid and log-compressed, then passed through its own stack of
//! conv / batch-norm / relu blocks, global average pooling and a dense layer
//! producing a 128-dimensional embedding. The three embeddings are
//! concatenated into the 384-dimensional scoring embedding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::features::{FeatureBundle, Waveform};

pub const EMBEDDING_DIM: usize = 128;
pub const BRANCHES: usize = 3;
pub const SUB_CLUSTERS: usize = 16;

const LOG_FLOOR: f32 = 1e-3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    SpecShort,
    SpecLong,
    DftMag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchArchitecture {
    pub input: InputKind,
    /// Pooled input size: `[time, freq]` for spectrograms, `[bins]` for the DFT.
    pub grid: Vec<usize>,
    pub blocks: Vec<ConvBlock>,
}

impl BranchArchitecture {
    fn is_2d(&self) -> bool {
        self.input != InputKind::DftMag
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub branches: Vec<BranchArchitecture>,
    pub sub_clusters: usize,
}

impl Default for Architecture {
    /// Desk-scale layout: conv blocks of 16/32/64 channels per branch.
    fn default() -> Self {
        Self::with_widths(&[16, 32, 64])
    }
}

impl Architecture {
    pub fn with_widths(widths: &[usize]) -> Self {
        Self::with_grids(widths, [64, 32], [16, 256], 512)
    }

    pub fn with_grids(widths: &[usize], short: [usize; 2], long: [usize; 2], dft: usize) -> Self {
        let blocks: Vec<ConvBlock> = widths
            .iter()
            .map(|&channels| ConvBlock {
                channels,
                kernel: 3,
                stride: 2,
            })
            .collect();
        Self {
            branches: vec![
                BranchArchitecture {
                    input: InputKind::SpecShort,
                    grid: short.to_vec(),
                    blocks: blocks.clone(),
                },
                BranchArchitecture {
                    input: InputKind::SpecLong,
                    grid: long.to_vec(),
                    blocks: blocks.clone(),
                },
                BranchArchitecture {
                    input: InputKind::DftMag,
                    grid: vec![dft],
                    blocks,
                },
            ],
            sub_clusters: SUB_CLUSTERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.len() != BRANCHES {
            return invalid(format!("expected {BRANCHES} branches, got {}", self.branches.len()));
        }
        let kinds: Vec<InputKind> = self.branches.iter().map(|b| b.input).collect();
        if kinds != [InputKind::SpecShort, InputKind::SpecLong, InputKind::DftMag] {
            return invalid(format!("branch inputs must be short, long, dft; got {kinds:?}"));
        }
        for b in &self.branches {
            let want = if b.is_2d() { 2 } else { 1 };
            if b.grid.len() != want || b.grid.contains(&0) {
                return invalid(format!("bad input grid {:?} for {:?}", b.grid, b.input));
            }
            if b.blocks.is_empty() {
                return invalid("each branch needs at least one conv block");
            }
            for blk in &b.blocks {
                if blk.channels == 0 || blk.kernel == 0 || blk.stride == 0 {
                    return invalid(format!("degenerate conv block {blk:?}"));
                }
            }
        }
        if self.sub_clusters == 0 {
            return invalid("sub_clusters must be positive");
        }
        Ok(())
    }
}

/// Average-pools a magnitude array onto `out` cells along one axis.
fn pool_bounds(n: usize, out: usize, i: usize) -> (usize, usize) {
    let lo = i * n / out;
    let hi = ((i + 1) * n).div_ceil(out).max(lo + 1).min(n);
    (lo, hi)
}

fn pool_2d(m: &Tensor<f32>, grid: &[usize]) -> Vec<f32> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Vec::with_capacity(grid[0] * grid[1]);
    for i in 0..grid[0] {
        let (r0, r1) = pool_bounds(rows, grid[0], i);
        for j in 0..grid[1] {
            let (c0, c1) = pool_bounds(cols, grid[1], j);
            let mut s = 0.0f64;
            for r in r0..r1 {
                s += m.row(r)[c0..c1].iter().map(|&v| v as f64).sum::<f64>();
            }
            out.push((s / ((r1 - r0) * (c1 - c0)) as f64) as f32);
        }
    }
    out
}

fn pool_1d(v: &[f32], len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let (a, b) = pool_bounds(v.len(), len, i);
            (v[a..b].iter().map(|&x| x as f64).sum::<f64>() / (b - a) as f64) as f32
        })
        .collect()
}

/// Network-ready inputs of one clip, one tensor per branch with a leading
/// channel axis of size 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub branches: [Tensor<f32>; BRANCHES],
}

impl ModelInput {
    pub fn from_features(bundle: &FeatureBundle, arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let log = |v: f32| (v + LOG_FLOOR).ln();
        let mk = |b: &BranchArchitecture| -> Result<Tensor<f32>> {
            let (data, shape) = match b.input {
                InputKind::SpecShort | InputKind::SpecLong => {
                    let m = if b.input == InputKind::SpecShort {
                        &bundle.spec_short
                    } else {
                        &bundle.spec_long
                    };
                    if m.shape().len() != 2 {
                        return shape_err("model input", format!("spectrogram shape {:?}", m.shape()));
                    }
                    (pool_2d(m, &b.grid), vec![1, b.grid[0], b.grid[1]])
                }
                InputKind::DftMag => {
                    if bundle.dft_mag.shape().len() != 1 {
                        return shape_err("model input", format!("spectrum shape {:?}", bundle.dft_mag.shape()));
                    }
                    (pool_1d(bundle.dft_mag.data(), b.grid[0]), vec![1, b.grid[0]])
                }
            };
            Tensor::new(shape, data.into_iter().map(log).collect())
        };
        Ok(Self {
            branches: [mk(&arch.branches[0])?, mk(&arch.branches[1])?, mk(&arch.branches[2])?],
        })
    }

    pub fn from_waveform(w: &Waveform, arch: &Architecture) -> Result<Self> {
        Self::from_features(&FeatureBundle::extract(w)?, arch)
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        for (t, b) in self.branches.iter().zip(&arch.branches) {
            let mut want = vec![1];
            want.extend_from_slice(&b.grid);
            if t.shape() != want.as_slice() {
                return shape_err("embed", format!("input {:?}, architecture expects {want:?}", t.shape()));
            }
        }
        Ok(())
    }
}

/// Branch embeddings and their concatenation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub branches: [Vec<f32>; BRANCHES],
    pub zcat: Vec<f32>,
}

/// Exponential moving averages tracked by each batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Parameters, fixed concatenated-head centers and batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub arch: Architecture,
    pub class_count: usize,
    /// Trainable weights, including the three branch sub-cluster banks.
    pub params: ParamStore<T>,
    /// Untrainable sub-cluster centers of the concatenated head, `(C * S, 384)`.
    pub fixed_centers: Tensor<T>,
    pub running: BTreeMap<String, RunningStats<T>>,
    /// Cosine scales for the concatenated head and the three branch heads.
    pub scales: [f64; 4],
    pub seed: u64,
    pub stage: u32,
}

pub fn branch_center_name(b: usize) -> String {
    format!("head{b}.centers")
}

/// Fixed AdaCos scale `sqrt(2) * ln(C * S - 1)`.
pub fn initial_scale(class_count: usize, sub_clusters: usize) -> f64 {
    let n = (class_count * sub_clusters) as f64;
    std::f64::consts::SQRT_2 * (n - 1.0).max(2.0).ln()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|v| (v / n) as f32));
    }
    out
}

/// Deterministic random initialization.
pub fn init_model(seed: u64, class_count: usize, arch: &Architecture) -> Result<ModelState> {
    if class_count == 0 {
        return invalid("class_count must be at least 1");
    }
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut running = BTreeMap::new();
    let s = arch.sub_clusters;
    for (bi, b) in arch.branches.iter().enumerate() {
        let mut cin = 1;
        for (li, blk) in b.blocks.iter().enumerate() {
            let taps = if b.is_2d() { blk.kernel * blk.kernel } else { blk.kernel };
            let fan_in = cin * taps;
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
            let mut shape = vec![blk.channels, cin, blk.kernel];
            if b.is_2d() {
                shape.push(blk.kernel);
            }
            let w: Vec<f32> = (0..blk.channels * fan_in)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            params.insert(format!("b{bi}.conv{li}.w"), Tensor::new(shape, w)?);
            params.insert(format!("b{bi}.bn{li}.gamma"), Tensor::filled(&[blk.channels], 1.0));
            params.insert(format!("b{bi}.bn{li}.beta"), Tensor::zeros(&[blk.channels]));
            running.insert(
                format!("b{bi}.bn{li}"),
                RunningStats {
                    mean: vec![0.0; blk.channels],
                    var: vec![1.0; blk.channels],
                },
            );
            cin = blk.channels;
        }
        let bound = (6.0 / (cin + EMBEDDING_DIM) as f64).sqrt();
        let w: Vec<f32> = (0..cin * EMBEDDING_DIM)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        params.insert(format!("b{bi}.dense.w"), Tensor::new(vec![cin, EMBEDDING_DIM], w)?);
        params.insert(format!("b{bi}.dense.b"), Tensor::zeros(&[EMBEDDING_DIM]));
    }
    for bi in 0..BRANCHES {
        let c = unit_rows(&mut rng, class_count * s, EMBEDDING_DIM);
        params.insert(
            branch_center_name(bi),
            Tensor::new(vec![class_count * s, EMBEDDING_DIM], c)?,
        );
    }
    let fixed = unit_rows(&mut rng, class_count * s, EMBEDDING_DIM * BRANCHES);
    let scale = initial_scale(class_count, s);
    Ok(ModelState {
        arch: arch.clone(),
        class_count,
        params,
        fixed_centers: Tensor::new(vec![class_count * s, EMBEDDING_DIM * BRANCHES], fixed)?,
        running,
        scales: [scale; 4],
        seed,
        stage: 0,
    })
}

/// Batch-norm behavior of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates are reported for updating.
    Train,
    /// Running statistics.
    Eval,
}

/// Graph handles produced by [`forward`].
pub struct ForwardOut<T> {
    pub branches: [Var; BRANCHES],
    pub zcat: Var,
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

/// Registers every trainable parameter on the graph.
pub fn register_params<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), g.param(k.clone(), v.clone())))
        .collect()
}

/// Stacks per-clip inputs into one batch tensor per branch.
pub fn stack_inputs<T: Scalar>(inputs: &[&ModelInput]) -> Result<[Tensor<T>; BRANCHES]> {
    let mk = |b: usize| -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<f32>> = inputs.iter().map(|i| &i.branches[b]).collect();
        Ok(Tensor::stack(&parts)?.cast())
    };
    Ok([mk(0)?, mk(1)?, mk(2)?])
}

/// Records the embedding network on `g` for a stacked batch.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    vars: &BTreeMap<String, Var>,
    batch: [Tensor<T>; BRANCHES],
    mode: BnMode,
) -> Result<ForwardOut<T>> {
    let mut stats = Vec::new();
    let mut outs = Vec::with_capacity(BRANCHES);
    for (bi, (b, input)) in state.arch.branches.iter().zip(batch).enumerate() {
        let p = |name: String| -> Result<Var> {
            vars.get(&name)
                .copied()
                .ok_or_else(|| crate::Error::InvalidArgument(format!("missing parameter `{name}`")))
        };
        let mut x = g.input(input);
        for (li, blk) in b.blocks.iter().enumerate() {
            let w = p(format!("b{bi}.conv{li}.w"))?;
            let pad = blk.kernel / 2;
            x = if b.is_2d() {
                g.conv2d(x, w, blk.stride, pad)?
            } else {
                g.conv1d(x, w, blk.stride, pad)?
            };
            let gamma = p(format!("b{bi}.bn{li}.gamma"))?;
            let beta = p(format!("b{bi}.bn{li}.beta"))?;
            let key = format!("b{bi}.bn{li}");
            x = match mode {
                BnMode::Train => {
                    let (y, s) = g.batch_norm_train(x, gamma, beta, T::lit(BN_EPS))?;
                    stats.push((key, s));
                    y
                }
                BnMode::Eval => {
                    let r = state
                        .running
                        .get(&key)
                        .ok_or_else(|| crate::Error::InvalidArgument(format!("missing running stats `{key}`")))?;
                    g.batch_norm_eval(x, gamma, beta, &r.mean, &r.var, T::lit(BN_EPS))?
                }
            };
            x = g.relu(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let dense = g.matmul(pooled, p(format!("b{bi}.dense.w"))?, false)?;
        outs.push(g.add_bias(dense, p(format!("b{bi}.dense.b"))?)?);
    }
    let zcat = g.concat(&outs)?;
    Ok(ForwardOut {
        branches: [outs[0], outs[1], outs[2]],
        zcat,
        batch_stats: stats,
    })
}

impl<T: Scalar> ModelState<T> {
    /// Folds observed batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[(String, BatchStats<T>)]) {
        let mom = T::lit(BN_MOMENTUM);
        for (key, s) in stats {
            if let Some(r) = self.running.get_mut(key) {
                for (rm, &m) in r.mean.iter_mut().zip(&s.mean) {
                    *rm = (T::one() - mom) * *rm + mom * m;
                }
                for (rv, &v) in r.var.iter_mut().zip(&s.var) {
                    *rv = (T::one() - mom) * *rv + mom * v;
                }
            }
        }
    }

    /// Rescales every trainable sub-cluster center to unit length.
    pub fn renormalize_centers(&mut self) {
        for b in 0..BRANCHES {
            if let Some(c) = self.params.get_mut(&branch_center_name(b)) {
                let d = *c.shape().last().expect("2D centers");
                for row in c.data_mut().chunks_mut(d) {
                    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12));
                    for v in row.iter_mut() {
                        *v = *v / n;
                    }
                }
            }
        }
    }

    /// Same model in another element type.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            class_count: self.class_count,
            params: self.params.cast(),
            fixed_centers: self.fixed_centers.cast(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: r.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                            var: r.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
            scales: self.scales,
            seed: self.seed,
            stage: self.stage,
        }
    }
}

impl ModelState<f32> {
    /// Inference-mode embeddings for a batch of clips.
    pub fn embed_batch(&self, inputs: &[&ModelInput]) -> Result<Vec<EmbeddingBundle>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        for i in inputs {
            i.check(&self.arch)?;
        }
        let mut g = Graph::<f32>::new();
        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.input(v.clone())))
            .collect();
        let out = forward(&mut g, self, &vars, stack_inputs(inputs)?, BnMode::Eval)?;
        let zcat = g.value(out.zcat);
        let mut res = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let row = zcat.row(i).to_vec();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::NonFinite {
                    node: out.zcat.id(),
                    op: "embed",
                });
            }
            res.push(EmbeddingBundle {
                branches: [
                    row[..EMBEDDING_DIM].to_vec(),
                    row[EMBEDDING_DIM..2 * EMBEDDING_DIM].to_vec(),
                    row[2 * EMBEDDING_DIM..].to_vec(),
                ],
                zcat: row,
            });
        }
        Ok(res)
    }

    /// Embeds clips in fixed-size chunks so results do not depend on how
    /// callers group them.
    pub fn embed_all(&self, inputs: &[&ModelInput]) -> Result<Vec<EmbeddingBundle>> {
        let parts: Vec<Vec<EmbeddingBundle>> = inputs
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| self.embed_batch(chunk))
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }
}

pub const EMBED_CHUNK: usize = 64;

/// Inference-mode embedding of one clip's features.
pub fn embed(bundle: &FeatureBundle, state: &ModelState) -> Result<EmbeddingBundle> {
    let input = ModelInput::from_features(bundle, &state.arch)?;
    Ok(state.embed_batch(&[&input])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Waveform;

    fn tiny() -> Architecture {
        Architecture::with_grids(&[4, 8], [8, 8], [4, 16], 32)
    }

    fn clip(seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..8000).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_model(7, 3, &tiny()).unwrap();
        let b = init_model(7, 3, &tiny()).unwrap();
        assert_eq!(a, b);
        let c = init_model(8, 3, &tiny()).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn bank_sizing() {
        let m = init_model(1, 7, &Architecture::default()).unwrap();
        assert_eq!(m.fixed_centers.shape(), &[7 * 16, 384]);
        for b in 0..BRANCHES {
            assert_eq!(m.params.get(&branch_center_name(b)).unwrap().shape(), &[7 * 16, 128]);
        }
        assert!(init_model(1, 0, &tiny()).is_err());
    }

    #[test]
    fn embedding_shapes_and_determinism() {
        let m = init_model(3, 2, &tiny()).unwrap();
        let f = FeatureBundle::extract(&clip(1)).unwrap();
        let e = embed(&f, &m).unwrap();
        assert_eq!(
            (
                e.branches[0].len(),
                e.branches[1].len(),
                e.branches[2].len(),
                e.zcat.len()
            ),
            (128, 128, 128, 384)
        );
        assert!(e.zcat.iter().all(|v| v.is_finite()));
        assert_eq!(e.zcat[..128], e.branches[0][..]);
        assert_eq!(e.zcat[256..], e.branches[2][..]);
        assert_eq!(embed(&f, &m).unwrap(), e);
    }

    #[test]
    fn batch_composition_does_not_change_inference() {
        let m = init_model(3, 2, &tiny()).unwrap();
        let ins: Vec<ModelInput> = (0..5)
            .map(|s| ModelInput::from_waveform(&clip(s), &m.arch).unwrap())
            .collect();
        let refs: Vec<&ModelInput> = ins.iter().collect();
        let all = m.embed_batch(&refs).unwrap();
        for (i, inp) in ins.iter().enumerate() {
            assert_eq!(m.embed_batch(&[inp]).unwrap()[0], all[i]);
        }
    }

    #[test]
    fn mismatched_input_rejected() {
        let m = init_model(3, 2, &tiny()).unwrap();
        let other = Architecture::with_grids(&[4], [4, 4], [4, 16], 32);
        let inp = ModelInput::from_waveform(&clip(1), &other).unwrap();
        assert!(m.embed_batch(&[&inp]).is_err());
    }

    #[test]
    fn pooling_covers_every_input_cell() {
        for (n, out) in [(10, 3), (3, 10), (65, 32), (2049, 256)] {
            let mut covered = vec![false; n];
            for i in 0..out {
                let (a, b) = pool_bounds(n, out, i);
                assert!(a < b && b <= n);
                covered[a..b].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }
}
