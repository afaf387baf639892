//! Evaluation protocol: pixel distance, surrogate identity and perceptual
//! distances, threshold-OR success, DSR aggregates, and a deterministic 2-D
//! PCA of latents.
//!
//! The identity and perceptual distances use frozen random networks in place
//! of pretrained ones. They keep the structure of the protocol (embedding
//! cosine distance; layer-averaged normalized feature distance) but not the
//! absolute scale of the pretrained metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Dense, ParameterBuilder};
use crate::tensor::{self, l2_norm, Activation, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    pub l2: f64,
    pub id: f64,
    pub lpips: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            l2: 0.05,
            id: 0.6,
            lpips: 0.4,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.l2, self.id, self.lpips].iter().all(|&t| t > 0.0 && t.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("thresholds must be positive: {self:?}")))
        }
    }
}

/// Mean squared pixel difference.
pub fn l2_image(y_clean: &Tensor, y_pert: &Tensor) -> Result<f64> {
    Ok(tensor::mse_loss(y_clean, y_pert)?.item())
}

/// One perceptual tap: average-pool by `pool`, then `tanh(W·p + b)`, with
/// non-negative per-feature weights.
#[derive(Debug, Clone)]
struct Tap {
    pool: usize,
    layer: Dense,
    weights: Vec<f64>,
}

/// Frozen random networks standing in for pretrained identity and
/// perceptual models.
#[derive(Debug, Clone)]
pub struct SurrogateEmbedder {
    seed: u64,
    image: [usize; 3],
    identity: Vec<Dense>,
    taps: Vec<Tap>,
}

impl SurrogateEmbedder {
    pub const EMBEDDING_DIM: usize = 16;

    pub fn new(seed: u64, image: [usize; 3]) -> Self {
        let pixels: usize = image.iter().product();
        let mut id = ParameterBuilder::new(seed, 10);
        let identity = vec![
            id.dense_with_bias("id.0", pixels, 32, 2.0),
            id.dense_with_bias("id.1", 32, Self::EMBEDDING_DIM, 2.0),
        ];

        let mut pb = ParameterBuilder::new(seed, 11);
        let [h, w, c] = image;
        let taps = [(1usize, 32usize), (2, 16), (4, 8)]
            .into_iter()
            .filter(|&(f, _)| h % f == 0 && w % f == 0)
            .map(|(pool, width)| {
                let fan_in = (h / pool) * (w / pool) * c;
                let layer = pb.dense_with_bias(&format!("tap{pool}"), fan_in, width, 2.0);
                let weights = pb
                    .uniform(&format!("tap{pool}.lin"), &[width], 0.5)
                    .data()
                    .iter()
                    .map(|v| 1.0 + v)
                    .collect();
                Tap { pool, layer, weights }
            })
            .collect();

        Self {
            seed,
            image,
            identity,
            taps,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check(&self, y: &Tensor) -> Result<()> {
        if y.shape() != self.image {
            return Err(Error::shape("surrogate_embedder", y.shape(), &self.image));
        }
        Ok(())
    }

    /// Identity embedding of an image.
    pub fn embed(&self, y: &Tensor) -> Result<Tensor> {
        self.check(y)?;
        let mut h = y.reshape(&[y.len()])?;
        for layer in &self.identity {
            h = tensor::activation(&tensor::forward_affine(&h, &layer.weight, &layer.bias)?, Activation::Tanh);
        }
        Ok(h)
    }

    /// Tapped perceptual features, one tensor per tap.
    pub fn features(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        self.check(y)?;
        self.taps
            .iter()
            .map(|tap| {
                let pooled = avg_pool(y, self.image, tap.pool);
                Ok(tensor::activation(
                    &tensor::forward_affine(&pooled, &tap.layer.weight, &tap.layer.bias)?,
                    Activation::Tanh,
                ))
            })
            .collect()
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }
}

fn avg_pool(y: &Tensor, [h, w, c]: [usize; 3], f: usize) -> Tensor {
    let (ph, pw) = (h / f, w / f);
    let d = y.data();
    let mut out = vec![0.0; ph * pw * c];
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += d[((py * f + dy) * w + px * f + dx) * c + ch];
                    }
                }
                out[(py * pw + px) * c + ch] = acc / (f * f) as f64;
            }
        }
    }
    Tensor::from_parts(vec![out.len()], out)
}

/// `1 − cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &Tensor, v: &Tensor) -> Result<f64> {
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm embedding"));
    }
    let cos = (u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Identity distance between two outputs under the surrogate embedder.
pub fn id_distance(y_clean: &Tensor, y_pert: &Tensor, embedder: &SurrogateEmbedder) -> Result<f64> {
    y_clean.expect_same_shape(y_pert, "id_distance")?;
    let a = embedder.embed(y_clean)?;
    if y_clean == y_pert {
        // Exact zero instead of 1 − cos(u, u) rounding; still reject a
        // degenerate embedding.
        return cosine_distance(&a, &a).map(|_| 0.0);
    }
    cosine_distance(&a, &embedder.embed(y_pert)?)
}

/// Mean over taps of `sqrt(Σ w_i Δ_i² / Σ w_i)` where `Δ` is the tapped
/// feature difference.
pub fn perceptual_distance(y_clean: &Tensor, y_pert: &Tensor, embedder: &SurrogateEmbedder) -> Result<f64> {
    y_clean.expect_same_shape(y_pert, "perceptual_distance")?;
    let fa = embedder.features(y_clean)?;
    let fb = embedder.features(y_pert)?;
    let total: f64 = embedder
        .taps
        .iter()
        .zip(fa.iter().zip(&fb))
        .map(|(tap, (a, b))| {
            let (num, den) = a
                .data()
                .iter()
                .zip(b.data())
                .zip(&tap.weights)
                .fold((0.0, 0.0), |(n, d), ((x, y), w)| (n + w * (x - y) * (x - y), d + w));
            (num / den).sqrt()
        })
        .sum();
    Ok(total / embedder.taps.len() as f64)
}

/// Success iff any metric strictly exceeds its threshold.
pub fn classify_success(l2: f64, id: f64, lpips: f64, th: &MetricThresholds) -> bool {
    l2 > th.l2 || id > th.id || lpips > th.lpips
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsrSummary {
    pub per_model: Vec<f64>,
    pub avg_dsr: f64,
    pub e_dsr: f64,
}

/// `flags[m][i]` is the success of image `i` on model `m`.
pub fn aggregate_dsr(flags: &[Vec<bool>]) -> Result<DsrSummary> {
    let first = flags
        .first()
        .ok_or_else(|| Error::InconsistentImages("no models".into()))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::InconsistentImages("no images".into()));
    }
    if let Some((m, f)) = flags.iter().enumerate().find(|(_, f)| f.len() != n) {
        return Err(Error::InconsistentImages(format!(
            "model {m} has {} images, model 0 has {n}",
            f.len()
        )));
    }
    let rate = |count: usize| count as f64 / n as f64;
    let per_model: Vec<f64> = flags
        .iter()
        .map(|f| rate(f.iter().filter(|&&s| s).count()))
        .collect();
    let avg_dsr = per_model.iter().sum::<f64>() / per_model.len() as f64;
    let all = (0..n).filter(|&i| flags.iter().all(|f| f[i])).count();
    Ok(DsrSummary {
        per_model,
        avg_dsr,
        e_dsr: rate(all),
    })
}

/// Result of a 2-D principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Unit principal directions (the second may be all zeros when the data
    /// is one-dimensional).
    pub components: [Vec<f64>; 2],
    /// Variance captured along each component.
    pub variances: [f64; 2],
}

/// Mean-centres the latents and projects them onto their top two principal
/// components. Each component is signed so that its largest-magnitude
/// coordinate is positive.
pub fn pca_project_latents(latents: &[Tensor]) -> Result<Projection> {
    if latents.len() < 2 {
        return Err(Error::Contract(format!("PCA needs at least 2 latents, got {}", latents.len())));
    }
    let shape = latents[0].shape();
    if let Some(bad) = latents.iter().find(|l| l.shape() != shape) {
        return Err(Error::shape("pca_project_latents", bad.shape(), shape));
    }
    let (n, d) = (latents.len(), latents[0].len());
    let mut centred = DMatrix::from_fn(n, d, |i, j| latents[i].data()[j]);
    // Shifted mean: exact when every latent is identical.
    for j in 0..d {
        let first = centred[(0, j)];
        let mean = first + centred.column(j).iter().map(|v| v - first).sum::<f64>() / n as f64;
        centred.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components[slot] = v;
        variances[slot] = eig.eigenvalues[k].max(0.0);
    }

    let points = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let p = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Projection {
        points,
        components,
        variances,
    })
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Inter-centroid distance divided by the mean of the two groups' average
/// distance-to-centroid.
pub fn separation_statistic(clean: &[[f64; 2]], disrupted: &[[f64; 2]]) -> f64 {
    if clean.is_empty() || disrupted.is_empty() {
        return 0.0;
    }
    let (ca, cb) = (centroid(clean), centroid(disrupted));
    let spread = |pts: &[[f64; 2]], c| pts.iter().map(|&p| dist(p, c)).sum::<f64>() / pts.len() as f64;
    let intra = 0.5 * (spread(clean, ca) + spread(disrupted, cb));
    dist(ca, cb) / intra.max(1e-12)
}
