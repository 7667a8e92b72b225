//! 2D trajectory projection: a static background cloud of assignments is
//! fitted with PCA, and all trajectory states are projected through the same
//! fitted map. Rendering is out of scope; the CSV files are the contract.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::chain::Trajectory;
use crate::error::{Error, Result};
use crate::problem::ProblemInstance;

/// Mean-centering plus top-2 orthonormal components of the sample
/// covariance, with a deterministic sign convention (the largest-magnitude
/// entry of each component is positive; ties to the lowest index).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaMap {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaMap {
    /// Projects a point through the fitted map.
    pub fn project(&self, point: &[f64]) -> (f64, f64) {
        assert_eq!(point.len(), self.mean.len(), "dimension mismatch");
        let mut out = [0.0f64; 2];
        for (c, o) in self.components.iter().zip(out.iter_mut()) {
            *o = point
                .iter()
                .zip(&self.mean)
                .zip(c)
                .map(|((x, m), w)| (x - m) * w)
                .sum();
        }
        (out[0], out[1])
    }
}

fn mat_vec(cov: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    cov.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let dot: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
    for (x, a) in v.iter_mut().zip(against) {
        *x -= dot * a;
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Fits a 2-component PCA map on `points` via orthogonal (simultaneous)
/// iteration with a final Rayleigh–Ritz rotation. Refuses fewer than 2
/// points or dimension < 2.
pub fn pca_fit(points: &[Vec<f64>]) -> Result<PcaMap> {
    if points.len() < 2 {
        return Err(Error::Refused(format!("PCA needs >= 2 points, got {}", points.len())));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::Refused("PCA needs dimension >= 2".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Config("ragged point set".into()));
    }

    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    // Sample covariance (1/(N-1)).
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        let centered: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            if centered[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i][j] += centered[i] * centered[j] / (n - 1.0);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();

    // Deterministic initial block: e0 and e1.
    let mut q1 = vec![0.0; d];
    q1[0] = 1.0;
    let mut q2 = vec![0.0; d];
    q2[1] = 1.0;
    for _ in 0..500 {
        let mut z1 = mat_vec(&cov, &q1);
        let mut z2 = mat_vec(&cov, &q2);
        if normalize(&mut z1) == 0.0 {
            z1 = q1.clone(); // rank-deficient: keep previous direction
        }
        orthogonalize(&mut z2, &z1);
        if normalize(&mut z2) == 0.0 {
            z2 = q2.clone();
            orthogonalize(&mut z2, &z1);
            normalize(&mut z2);
        }
        q1 = z1;
        q2 = z2;
    }

    // Rayleigh-Ritz on the 2D subspace: diagonalize the projected 2x2 matrix.
    let c1 = mat_vec(&cov, &q1);
    let c2 = mat_vec(&cov, &q2);
    let a: f64 = q1.iter().zip(&c1).map(|(x, y)| x * y).sum();
    let b: f64 = q1.iter().zip(&c2).map(|(x, y)| x * y).sum();
    let c: f64 = q2.iter().zip(&c2).map(|(x, y)| x * y).sum();
    // Eigenpairs of [[a, b], [b, c]].
    let disc = ((a - c) * 0.5).hypot(b);
    let l1 = (a + c) * 0.5 + disc;
    let l2 = (a + c) * 0.5 - disc;
    let (cos_t, sin_t) = if b.abs() > 1e-300 {
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        (theta.cos(), theta.sin())
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let mut comp1: Vec<f64> =
        q1.iter().zip(&q2).map(|(x, y)| cos_t * x + sin_t * y).collect();
    let mut comp2: Vec<f64> =
        q1.iter().zip(&q2).map(|(x, y)| -sin_t * x + cos_t * y).collect();
    normalize(&mut comp1);
    orthogonalize(&mut comp2, &comp1);
    normalize(&mut comp2);
    fix_sign(&mut comp1);
    fix_sign(&mut comp2);

    let ratios = if trace > 0.0 {
        vec![(l1 / trace).max(0.0), (l2 / trace).max(0.0)]
    } else {
        vec![0.0, 0.0]
    };
    Ok(PcaMap {
        mean,
        components: vec![comp1, comp2],
        explained_variance: vec![l1.max(0.0), l2.max(0.0)],
        explained_variance_ratio: ratios,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExportConfig {
    /// Background cloud size (half random assignments, half corrupted
    /// targets).
    pub n_background: usize,
    /// Corruption fraction range for the corrupted-target half.
    pub corruption_lo: f64,
    pub corruption_hi: f64,
    pub seed: u64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { n_background: 2000, corruption_lo: 0.1, corruption_hi: 0.9, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportSummary {
    /// Projection of the target solution.
    pub target: (f64, f64),
    pub explained_variance_ratio: Vec<f64>,
    pub n_background: usize,
    pub n_trajectory_points: usize,
}

/// Flattens an assignment restricted to the unfixed variables into a one-hot
/// vector in `R^(K * U)`.
fn flatten(assignment: &[usize], unfixed: &[usize], k: usize) -> Vec<f64> {
    let mut v = vec![0.0; unfixed.len() * k];
    for (slot, &i) in unfixed.iter().enumerate() {
        v[slot * k + assignment[i]] = 1.0;
    }
    v
}

/// Builds the static background cloud, fits the PCA map on it, projects all
/// trajectory states through the same map, and writes `points.csv`
/// (`traj,x,y,t,accuracy`) and `background.csv` (`x,y,kind`). Accuracy is
/// the number of decoded variables matching the target.
pub fn export_trajectory(
    trajectories: &[Trajectory],
    instance: &ProblemInstance,
    target: &[usize],
    config: &ExportConfig,
    out_dir: &Path,
) -> Result<ExportSummary> {
    let unfixed = instance.free_vars();
    if unfixed.is_empty() {
        return Err(Error::Refused("instance has no unfixed variables to project".into()));
    }
    if target.len() != instance.n_vars {
        return Err(Error::Config("target length does not match instance".into()));
    }
    let k = instance.domain_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n_random = config.n_background / 2;
    let n_corrupt = config.n_background - n_random;
    let mut background: Vec<(Vec<f64>, &'static str)> =
        Vec::with_capacity(config.n_background);
    let mut assignment = target.to_vec();
    for _ in 0..n_random {
        for &i in &unfixed {
            assignment[i] = rng.random_range(0..k);
        }
        background.push((flatten(&assignment, &unfixed, k), "random"));
    }
    for _ in 0..n_corrupt {
        assignment.copy_from_slice(target);
        let frac = rng.random_range(config.corruption_lo..config.corruption_hi);
        let n_corr = ((frac * unfixed.len() as f64).ceil() as usize).clamp(1, unfixed.len());
        for _ in 0..n_corr {
            let slot = unfixed[rng.random_range(0..unfixed.len())];
            assignment[slot] = rng.random_range(0..k);
        }
        background.push((flatten(&assignment, &unfixed, k), "corrupted"));
    }

    let cloud: Vec<Vec<f64>> = background.iter().map(|(v, _)| v.clone()).collect();
    let map = pca_fit(&cloud)?;

    std::fs::create_dir_all(out_dir)?;
    let mut bg_file = std::fs::File::create(out_dir.join("background.csv"))?;
    writeln!(bg_file, "x,y,kind")?;
    for (v, kind) in &background {
        let (x, y) = map.project(v);
        writeln!(bg_file, "{x},{y},{kind}")?;
    }

    let mut pts_file = std::fs::File::create(out_dir.join("points.csv"))?;
    writeln!(pts_file, "traj,x,y,t,accuracy")?;
    let mut n_points = 0;
    for (ti, traj) in trajectories.iter().enumerate() {
        for step in &traj.steps {
            let v = flatten(&step.decoded, &unfixed, k);
            let (x, y) = map.project(&v);
            let accuracy =
                step.decoded.iter().zip(target).filter(|(a, b)| a == b).count();
            writeln!(pts_file, "{ti},{x},{y},{},{accuracy}", step.t)?;
            n_points += 1;
        }
    }

    let target_point = map.project(&flatten(target, &unfixed, k));
    let summary = ExportSummary {
        target: target_point,
        explained_variance_ratio: map.explained_variance_ratio.clone(),
        n_background: config.n_background,
        n_trajectory_points: n_points,
    };
    std::fs::write(
        out_dir.join("projection.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{sample_chain, ChainConfig};
    use crate::denoiser::{ConstantDenoiser, InstanceContext};
    use crate::problem::{gen_graph_instance, load_sudoku, GraphFamily};
    use std::sync::Arc;

    #[test]
    fn line_in_2d_is_rank_one() {
        let points: Vec<Vec<f64>> =
            (0..20).map(|i| vec![i as f64 * 2.0, i as f64 * -1.0]).collect();
        let map = pca_fit(&points).unwrap();
        assert!((map.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(map.explained_variance[1].abs() < 1e-9);
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let map = pca_fit(&points).unwrap();
        let dot: f64 = map.components[0]
            .iter()
            .zip(&map.components[1])
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-10);
        for c in &map.components {
            let norm: f64 = c.iter().map(|x| x * x).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_projects_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let map = pca_fit(&points).unwrap();
        let (x, y) = map.project(&map.mean.clone());
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
    }

    #[test]
    fn fit_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let map_a = pca_fit(&points).unwrap();
        let mut shuffled = points.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        let map_b = pca_fit(&shuffled).unwrap();
        let probe: Vec<f64> = (0..5).map(|i| 0.1 * i as f64).collect();
        let (xa, ya) = map_a.project(&probe);
        let (xb, yb) = map_b.project(&probe);
        assert!((xa - xb).abs() < 1e-9 && (ya - yb).abs() < 1e-9);
    }

    #[test]
    fn pca_refusals() {
        assert!(pca_fit(&[vec![1.0, 2.0]]).is_err());
        assert!(pca_fit(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn eigenvalues_match_2d_reference() {
        // Known covariance: points (±1, ±0.5) on axes.
        let points = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 0.5],
            vec![0.0, -0.5],
        ];
        let map = pca_fit(&points).unwrap();
        // Sample covariance diag(2/3, 1/6); components axis-aligned.
        assert!((map.explained_variance[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((map.explained_variance[1] - 1.0 / 6.0).abs() < 1e-9);
        assert!((map.components[0][0].abs() - 1.0).abs() < 1e-9);
        assert!((map.components[1][1].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trajectory_ending_at_target_hits_anchor() {
        let dir = tempfile::tempdir().unwrap();
        let inst = load_sudoku("1234000000000000", 4).unwrap();
        let target: Vec<usize> = load_sudoku("1234341221434321", 4)
            .unwrap()
            .givens
            .values()
            .copied()
            .collect();
        let ctx = InstanceContext::new(Arc::new(inst.clone()));
        // Deterministic proposal straight to the target.
        let d = ConstantDenoiser::toward_assignment(&target, 4);
        let chain = ChainConfig {
            t_steps: 2,
            rho_min: 1.0,
            rho_max: 1.0,
            seed: 5,
            ..Default::default()
        };
        let traj = sample_chain(&d, &ctx, &chain).unwrap();
        assert_eq!(traj.final_assignment, target);
        let config = ExportConfig { n_background: 200, seed: 3, ..Default::default() };
        let summary =
            export_trajectory(&[traj], &inst, &target, &config, dir.path()).unwrap();

        let points = std::fs::read_to_string(dir.path().join("points.csv")).unwrap();
        let last = points.lines().last().unwrap();
        let cols: Vec<&str> = last.split(',').collect();
        let (x, y): (f64, f64) = (cols[1].parse().unwrap(), cols[2].parse().unwrap());
        assert!((x - summary.target.0).abs() < 1e-9);
        assert!((y - summary.target.1).abs() < 1e-9);
        // Final accuracy = all 16 cells correct.
        assert_eq!(cols[4], "16");
        let bg = std::fs::read_to_string(dir.path().join("background.csv")).unwrap();
        assert_eq!(bg.lines().count(), 201);
    }

    #[test]
    fn refuses_fully_given_instance() {
        let dir = tempfile::tempdir().unwrap();
        let inst = load_sudoku("1234341221434321", 4).unwrap();
        let target: Vec<usize> = inst.givens.values().copied().collect();
        let err = export_trajectory(&[], &inst, &target, &ExportConfig::default(), dir.path())
            .unwrap_err();
        assert!(matches!(err, Error::Refused(_)));
    }

    #[test]
    fn export_works_for_graph_instances() {
        let dir = tempfile::tempdir().unwrap();
        let inst = gen_graph_instance(GraphFamily::MaxCut, 8, 0.4, 12).unwrap();
        let best = crate::baselines::brute_force(&inst).unwrap();
        let target = best.optima[0].clone();
        let ctx = InstanceContext::new(Arc::new(inst.clone()));
        let chain = ChainConfig { t_steps: 10, seed: 1, ..Default::default() };
        let traj = sample_chain(&crate::denoiser::EchoDenoiser, &ctx, &chain).unwrap();
        let config = ExportConfig { n_background: 100, seed: 9, ..Default::default() };
        let summary =
            export_trajectory(&[traj], &inst, &target, &config, dir.path()).unwrap();
        assert_eq!(summary.n_trajectory_points, 11);
    }
}
