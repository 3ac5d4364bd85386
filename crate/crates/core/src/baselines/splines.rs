//! Penalized radial-basis adjustment for location, in one stage (spatial)
//! or with the treatment's spatial component removed first (spatial+).

use nalgebra::DMatrix;
use rand::Rng;

use super::linear::{penalized_lstsq, predict, with_intercept};
use super::{plug_in, BaselineFit, Inputs};
use crate::dataset::SpaceDataset;
use crate::error::{Error, Result};
use crate::rng;

const MAX_CENTERS: usize = 200;
const KMEANS_ITERATIONS: usize = 100;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's algorithm from a k-means++ start drawn from the "kmeans"
/// stream. Empty clusters keep their previous center.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Vec<[f64; 2]> {
    assert!(k >= 1 && k <= points.len());
    let mut r = rng::stream(seed, "kmeans");
    let mut centers = vec![points[r.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = r.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if t < *d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            r.random_range(0..points.len())
        };
        centers.push(points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(*p, points[next]));
        }
    }
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = (0..k)
                .min_by(|&a, &b| dist2(*p, centers[a]).total_cmp(&dist2(*p, centers[b])))
                .expect("k >= 1");
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (p, &c) in points.iter().zip(&assign) {
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            sums[c][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    centers
}

/// Gaussian radial basis functions at k-means centers of the coordinates,
/// with bandwidth equal to the mean nearest-center distance.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    pub centers: Vec<[f64; 2]>,
    pub bandwidth: f64,
    /// One row per node, one column per center.
    pub values: DMatrix<f64>,
}

impl SplineBasis {
    pub fn new(coords: &[[f64; 2]], seed: u64) -> Result<Self> {
        let n = coords.len();
        let k = (n / 20).clamp(1, MAX_CENTERS);
        let centers = kmeans(coords, k, seed);
        let bandwidth = if k == 1 {
            let c = centers[0];
            (coords.iter().map(|p| dist2(*p, c)).sum::<f64>() / n as f64).sqrt()
        } else {
            centers
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    centers
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, d)| dist2(*c, *d))
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .sum::<f64>()
                / k as f64
        };
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidParameter("coordinates are all identical".into()));
        }
        let values = DMatrix::from_fn(n, k, |i, j| (-dist2(coords[i], centers[j]) / (2.0 * bandwidth * bandwidth)).exp());
        Ok(SplineBasis {
            centers,
            bandwidth,
            values,
        })
    }

    pub fn for_dataset(dataset: &SpaceDataset, seed: u64) -> Result<Self> {
        let coords = dataset
            .graph
            .coords()
            .ok_or_else(|| Error::InvalidParameter("spline adjustment needs node coordinates".into()))?;
        Self::new(coords, seed)
    }

    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }
}

/// Design `[1, leading..., basis]` with the penalty on the basis columns.
fn design(n: usize, leading: &[&[f64]], basis: &SplineBasis, lam: f64) -> (DMatrix<f64>, Vec<f64>) {
    let lin = with_intercept(n, leading);
    let k = basis.n_centers();
    let d = DMatrix::from_fn(n, lin.ncols() + k, |i, j| {
        if j < lin.ncols() { lin[(i, j)] } else { basis.values[(i, j - lin.ncols())] }
    });
    let mut pen = vec![0.0; lin.ncols()];
    pen.extend(std::iter::repeat_n(lam, k));
    (d, pen)
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn check_lam(lam: f64) -> Result<()> {
    if lam >= 0.0 && lam.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("penalty must be finite and nonnegative, got {lam}")))
    }
}

/// Fitted outcome model of the one-stage spline adjustment. Returns the
/// predictions on every node and the treatment coefficient.
pub(crate) fn spatial_predict(inp: &Inputs, basis: &SplineBasis, train: &[usize], lam: f64) -> Result<(Vec<f64>, f64)> {
    check_lam(lam)?;
    let mut lead = vec![inp.a];
    lead.extend(&inp.x);
    let (d, pen) = design(inp.n(), &lead, basis, lam);
    let theta = penalized_lstsq(&rows(&d, train), &pick(inp.y, train), &pen)?;
    Ok((predict(&d, &theta), theta[1]))
}

/// Two-stage fit: treatment on covariates and basis, then outcome on the
/// treatment residual, covariates and a second basis. Returns outcome
/// predictions on every node and the residual-treatment coefficient.
pub(crate) fn spatialplus_predict(
    inp: &Inputs,
    basis: &SplineBasis,
    train: &[usize],
    lam_t: f64,
    lam_y: f64,
) -> Result<(Vec<f64>, f64)> {
    check_lam(lam_t)?;
    check_lam(lam_y)?;
    let (d1, pen1) = design(inp.n(), &inp.x, basis, lam_t);
    let theta1 = penalized_lstsq(&rows(&d1, train), &pick(inp.a, train), &pen1)?;
    let a_hat = predict(&d1, &theta1);
    let a_res: Vec<f64> = inp.a.iter().zip(&a_hat).map(|(a, h)| a - h).collect();
    let mut lead: Vec<&[f64]> = vec![&a_res];
    lead.extend(&inp.x);
    let (d2, pen2) = design(inp.n(), &lead, basis, lam_y);
    let theta2 = penalized_lstsq(&rows(&d2, train), &pick(inp.y, train), &pen2)?;
    Ok((predict(&d2, &theta2), theta2[1]))
}

fn finish(inp: &Inputs, fitted: Vec<f64>, tau: f64, basis: &SplineBasis) -> BaselineFit {
    // Both models are affine in the treatment with slope tau.
    let base: Vec<f64> = fitted.iter().zip(inp.a).map(|(f, a)| f - tau * a).collect();
    BaselineFit {
        estimates: plug_in(&base, tau, None, inp.grid, inp.kind),
        diagnostics: [("tau".to_string(), tau), ("n_centers".to_string(), basis.n_centers() as f64)].into(),
        pairs: None,
        matched_ite: None,
    }
}

pub fn run_spatial(dataset: &SpaceDataset, lam: f64, seed: u64) -> Result<BaselineFit> {
    let inp = Inputs::new(dataset);
    let basis = SplineBasis::for_dataset(dataset, seed)?;
    let all: Vec<usize> = (0..inp.n()).collect();
    let (fitted, tau) = spatial_predict(&inp, &basis, &all, lam)?;
    Ok(finish(&inp, fitted, tau, &basis))
}

pub fn run_spatialplus(dataset: &SpaceDataset, lam_t: f64, lam_y: f64, seed: u64) -> Result<BaselineFit> {
    let inp = Inputs::new(dataset);
    let basis = SplineBasis::for_dataset(dataset, seed)?;
    let all: Vec<usize> = (0..inp.n()).collect();
    let (fitted, tau) = spatialplus_predict(&inp, &basis, &all, lam_t, lam_y)?;
    Ok(finish(&inp, fitted, tau, &basis))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{lattice_dataset, normals};
    use super::super::run_ols;
    use super::*;
    use crate::features::TreatmentType;

    #[test]
    fn kmeans_separates_clusters() {
        let mut pts = Vec::new();
        for i in 0..30 {
            let t = i as f64 * 0.01;
            pts.push([t, t]);
            pts.push([5.0 + t, 5.0 - t]);
        }
        let mut c = kmeans(&pts, 2, 0);
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((c[0][0] - 0.145).abs() < 1e-9 && (c[1][0] - 5.145).abs() < 1e-9);
    }

    fn smooth_confounded(seed: u64) -> SpaceDataset {
        let g = 30;
        let n = g * g;
        let u: Vec<f64> = (0..n)
            .map(|i| {
                let (r, c) = ((i / g) as f64 / g as f64, (i % g) as f64 / g as f64);
                (6.0 * r).sin() + (5.0 * c).cos()
            })
            .collect();
        let ea = normals(seed, "a", n);
        let ey = normals(seed, "y", n);
        let x = normals(seed, "x", n);
        let a: Vec<f64> = (0..n).map(|i| u[i] + 0.5 * ea[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| a[i] + 0.5 * x[i] + 2.0 * u[i] + 0.3 * ey[i]).collect();
        lattice_dataset(g, vec![x], a, y, 1.0, TreatmentType::Continuous)
    }

    #[test]
    fn huge_penalty_reduces_to_ols() {
        let d = smooth_confounded(0);
        let s = run_spatial(&d, 1e9, 0).unwrap();
        let o = run_ols(&d).unwrap();
        assert!((s.diagnostics["tau"] - o.diagnostics["tau"]).abs() < 1e-4);
    }

    #[test]
    fn spline_adjustment_reduces_smooth_confounding() {
        let d = smooth_confounded(1);
        let o = run_ols(&d).unwrap().diagnostics["tau"];
        let s = run_spatial(&d, 1e-4, 0).unwrap().diagnostics["tau"];
        let p = run_spatialplus(&d, 1e-4, 1e-4, 0).unwrap().diagnostics["tau"];
        assert!((o - 1.0).abs() > 0.5, "{o}");
        assert!((p - 1.0).abs() < (o - 1.0).abs() / 3.0, "{p} vs {o}");
        assert!((s - 1.0).abs() < (o - 1.0).abs(), "{s} vs {o}");
    }

    #[test]
    fn requires_coordinates() {
        let mut d = smooth_confounded(0);
        let edges: Vec<(usize, usize)> = d.graph.edges().iter().map(|&(a, b)| (a as usize, b as usize)).collect();
        d.graph = crate::graph::SpatialGraph::from_index_edges(900, edges, None).unwrap();
        assert!(run_spatial(&d, 0.1, 0).is_err());
    }
}
