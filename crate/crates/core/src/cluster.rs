//! PCA and k-means for clustering per-person pose and motion descriptors
//! into pseudo-labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Mat};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Eigenvalues below this fraction of the largest count as zero rank.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[D_in, d]`, orthonormal columns.
    pub basis: Mat,
    /// Every covariance eigenvalue, descending.
    pub eigenvalues: Vec<f64>,
}

/// Top-`d` principal components of the rows of `x`. Each component is
/// signed so that its largest-magnitude entry is positive.
pub fn pca_fit(x: &Mat, d: usize) -> Result<Pca> {
    if x.rows <= d {
        return Err(Error::Rank(format!("{} rows cannot give {d} components", x.rows)));
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    centered.subtract_row(&mean);
    let mut cov = centered.gram();
    for v in cov.data.iter_mut() {
        *v /= (x.rows - 1) as f64;
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let top = values.first().copied().unwrap_or(0.0);
    let rank = values.iter().filter(|&&v| v > RANK_TOLERANCE * top.max(f64::MIN_POSITIVE)).count();
    if d > rank {
        return Err(Error::Rank(format!("requested {d} components but data has rank {rank}")));
    }
    let mut basis = Mat::zeros(x.cols, d);
    for c in 0..d {
        let col: Vec<f64> = (0..x.cols).map(|r| vectors.at(r, c)).collect();
        let mut lead = 0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = r;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.into_iter().enumerate() {
            basis.set(r, c, sign * v);
        }
    }
    Ok(Pca {
        mean,
        basis,
        eigenvalues: values,
    })
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.basis.cols
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        if x.cols != self.mean.len() {
            return Err(Error::Shape(format!("PCA fitted on {} columns, got {}", self.mean.len(), x.cols)));
        }
        let mut c = x.clone();
        c.subtract_row(&self.mean);
        Ok(c.matmul(&self.basis))
    }

    pub fn inverse(&self, z: &Mat) -> Mat {
        let mut x = z.matmul(&self.basis.transpose());
        for r in 0..x.rows {
            for (c, m) in self.mean.iter().enumerate() {
                let v = x.at(r, c) + m;
                x.set(r, c, v);
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// `[K, d]`
    pub centroids: Mat,
    pub labels: Vec<usize>,
    /// Inertia after initialization and after every Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of every row; distance ties go to the lower index.
pub fn assign(x: &Mat, centroids: &Mat) -> Vec<usize> {
    (0..x.rows).map(|r| nearest(x.row(r), centroids).0).collect()
}

fn nearest(p: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows {
        let d = sq_dist(p, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn inertia(x: &Mat, centroids: &Mat, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(r, &k)| sq_dist(x.row(r), centroids.row(k))).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A cluster left empty is moved to the
/// point farthest from its current centroid.
pub fn kmeans(x: &Mat, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    if k == 0 || x.rows < k {
        return Err(Error::config_key("cluster.k", format!("need 1 <= K <= N, got K = {k}, N = {}", x.rows)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Mat::zeros(k, x.cols);
    let first = rng.random_range(0..x.rows);
    centroids.data[..x.cols].copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..x.rows).map(|r| sq_dist(x.row(r), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = x.rows - 1;
            for (r, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = r;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..x.rows)
        };
        centroids.data[c * x.cols..(c + 1) * x.cols].copy_from_slice(x.row(pick));
        for (r, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(r), centroids.row(c)));
        }
    }
    let mut labels = assign(x, &centroids);
    let mut history = vec![inertia(x, &centroids, &labels)];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = Mat::zeros(k, x.cols);
        let mut counts = vec![0usize; k];
        for (r, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (j, v) in x.row(r).iter().enumerate() {
                sums.data[c * x.cols + j] += v;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                for j in 0..x.cols {
                    centroids.data[c * x.cols + j] = sums.data[c * x.cols + j] / n as f64;
                }
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                let mut far = (0, -1.0);
                for (r, &l) in labels.iter().enumerate() {
                    let d = sq_dist(x.row(r), centroids.row(l));
                    if d > far.1 {
                        far = (r, d);
                    }
                }
                centroids.data[c * x.cols..(c + 1) * x.cols].copy_from_slice(x.row(far.0));
                labels[far.0] = c;
            }
        }
        let next = assign(x, &centroids);
        let changed = next != labels;
        labels = next;
        history.push(inertia(x, &centroids, &labels));
        if !changed {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        labels,
        inertia: history,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureRecipe {
    PoseOnly,
    PoseMotion,
}

impl FeatureRecipe {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pose-only" => Some(FeatureRecipe::PoseOnly),
            "pose+dimofs" => Some(FeatureRecipe::PoseMotion),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureRecipe::PoseOnly => "pose-only",
            FeatureRecipe::PoseMotion => "pose+dimofs",
        }
    }
}

/// PCA for per-joint motion features plus k-means centroids over rows of
/// pose coordinates, optionally followed by the reduced motion features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub recipe: FeatureRecipe,
    pub pca: Option<Pca>,
    pub centroids: Mat,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows
    }

    pub fn assign(&self, rows: &Mat) -> Vec<usize> {
        assign(rows, &self.centroids)
    }

    /// Sections `cluster.*` for the checkpoint format.
    pub fn to_params(&self) -> ParamStore {
        let mut s = ParamStore::new();
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let code = match self.recipe {
            FeatureRecipe::PoseOnly => 0.0,
            FeatureRecipe::PoseMotion => 1.0,
        };
        s.insert("cluster.recipe", Tensor::scalar(code));
        let c = &self.centroids;
        s.insert("cluster.centroids", Tensor::new(&[c.rows, c.cols], f32s(&c.data)).expect("shape"));
        if let Some(p) = &self.pca {
            s.insert("cluster.pca_mean", Tensor::new(&[p.mean.len()], f32s(&p.mean)).expect("shape"));
            s.insert("cluster.pca_basis", Tensor::new(&[p.basis.rows, p.basis.cols], f32s(&p.basis.data)).expect("shape"));
            s.insert("cluster.pca_eigenvalues", Tensor::new(&[p.eigenvalues.len()], f32s(&p.eigenvalues)).expect("shape"));
        }
        s
    }

    pub fn from_params(s: &ParamStore) -> Result<Self> {
        let f64s = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mat = |t: &Tensor| -> Result<Mat> {
            let (r, c) = t.dims2()?;
            Ok(Mat::from_rows(r, c, f64s(t)))
        };
        let recipe = match s.get("cluster.recipe")?.item() {
            0.0 => FeatureRecipe::PoseOnly,
            1.0 => FeatureRecipe::PoseMotion,
            v => return Err(Error::config(format!("unknown cluster recipe code {v}"))),
        };
        let pca = if recipe == FeatureRecipe::PoseMotion {
            Some(Pca {
                mean: f64s(s.get("cluster.pca_mean")?),
                basis: mat(s.get("cluster.pca_basis")?)?,
                eigenvalues: f64s(s.get("cluster.pca_eigenvalues")?),
            })
        } else {
            None
        };
        Ok(ClusterModel {
            recipe,
            pca,
            centroids: mat(s.get("cluster.centroids")?)?,
        })
    }
}

/// Pose coordinates `(y, x)` per joint relative to the box centre and
/// divided by the frame size.
pub fn pose_coordinates(keypoints: &[(f32, f32)], center: (f32, f32), height: usize, width: usize) -> Vec<f64> {
    keypoints
        .iter()
        .flat_map(|&(y, x)| [((y - center.0) / height as f32) as f64, ((x - center.1) / width as f32) as f64])
        .collect()
}

/// One clustering row: pose coordinates, then (for the motion recipe) the
/// PCA-reduced joint features averaged over joints. `joint_features` is
/// `[J, D]` and ignored by the pose-only recipe.
pub fn cluster_row(recipe: FeatureRecipe, pose: &[f64], joint_features: &Mat, pca: Option<&Pca>) -> Result<Vec<f64>> {
    let mut row = pose.to_vec();
    if recipe == FeatureRecipe::PoseMotion {
        let pca = pca.ok_or_else(|| Error::config_key("cluster.recipe", "pose+dimofs rows need a fitted PCA"))?;
        let z = pca.transform(joint_features)?;
        for c in 0..z.cols {
            row.push((0..z.rows).map(|r| z.at(r, c)).sum::<f64>() / z.rows as f64);
        }
    }
    Ok(row)
}

pub fn rows_to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    Ok(Mat::from_rows(rows.len(), cols, rows.concat()))
}
