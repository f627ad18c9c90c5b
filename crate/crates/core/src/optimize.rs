//! Derivative-free minimization of the alignment cost: a finite-difference
//! gradient-descent warm-up, Nelder-Mead, then coordinate descent.

use std::io::Write;

use thiserror::Error;

use crate::cost::{evaluate_pose, CostError, CostOptions, CostReport};
use crate::depth::DepthImage;
use crate::filter::gaussian_blur_valid;
use crate::geometry::{CameraModel, Pose6D, RigidTransform};
use crate::meshify::{meshify, LabeledMesh, MeshError, MeshifyOptions};
use crate::raster::{render, LabeledRender, MeshInstance};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("map mesh has no triangles")]
    EmptyMap,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invalid optimizer options: {0}")]
    Options(String),
}

/// Outcome of a generic minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Stopped by its own tolerance rather than the evaluation budget.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of simplex values is at most this...
    pub ftol: f64,
    /// ...and every vertex is within this distance of the best one.
    pub xtol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 500,
            ftol: 1e-12,
            xtol: 1e-8,
        }
    }
}

const NM_REFLECT: f64 = 1.0;
const NM_EXPAND: f64 = 2.0;
const NM_CONTRACT: f64 = 0.5;
const NM_SHRINK: f64 = 0.5;

/// Nelder-Mead with reflection 1, expansion 2, contraction 0.5 and shrink 0.5.
/// The initial simplex is `x0` plus `x0 + scale[i]·eᵢ` for every axis.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    scale: &[f64],
    opts: &NelderMeadOptions,
) -> Minimum {
    let n = x0.len();
    assert_eq!(scale.len(), n, "one simplex scale per dimension");
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    if opts.max_evals == 0 {
        return Minimum {
            x: x0.to_vec(),
            f: f64::NAN,
            evals: 0,
            converged: false,
        };
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        if evals >= opts.max_evals {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += scale[i];
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }
    if simplex.len() < n + 1 {
        return best_of(&simplex, evals, false);
    }
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| {
        // stable, so equal values keep their age order
        s.sort_by(|a, b| a.1.total_cmp(&b.1));
    };
    sort(&mut simplex);
    loop {
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let diam = simplex[1..]
            .iter()
            .map(|(x, _)| dist(x, &simplex[0].0))
            .fold(0.0, f64::max);
        let flat = worst - best <= opts.ftol || (worst.is_infinite() && best.is_infinite());
        if flat && diam <= opts.xtol {
            return best_of(&simplex, evals, true);
        }
        if evals >= opts.max_evals {
            return best_of(&simplex, evals, false);
        }
        let mut c = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (ci, xi) in c.iter_mut().zip(x) {
                *ci += xi / n as f64;
            }
        }
        let along = |t: f64, from: &[f64]| -> Vec<f64> {
            c.iter().zip(from).map(|(ci, fi)| ci + t * (fi - ci)).collect()
        };
        let xw = simplex[n].0.clone();
        let xr = along(-NM_REFLECT, &xw);
        let fr = eval(&xr, &mut evals);
        let second_worst = simplex[n - 1].1;
        if fr < best {
            if evals >= opts.max_evals {
                simplex[n] = (xr, fr);
                sort(&mut simplex);
                continue;
            }
            let xe = along(-NM_REFLECT * NM_EXPAND, &xw);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < second_worst {
            simplex[n] = (xr, fr);
        } else {
            if evals >= opts.max_evals {
                continue;
            }
            let (xc, fc, ok) = if fr < simplex[n].1 {
                let xc = along(-NM_REFLECT * NM_CONTRACT, &xw);
                let fc = eval(&xc, &mut evals);
                (xc, fc, fc <= fr)
            } else {
                let xc = along(NM_CONTRACT, &xw);
                let fc = eval(&xc, &mut evals);
                (xc, fc, fc < simplex[n].1)
            };
            if ok {
                simplex[n] = (xc, fc);
            } else {
                let xb = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    if evals >= opts.max_evals {
                        break;
                    }
                    let x: Vec<f64> = xb.iter().zip(&v.0).map(|(b, xi)| b + NM_SHRINK * (xi - b)).collect();
                    let fx = eval(&x, &mut evals);
                    *v = (x, fx);
                }
            }
        }
        sort(&mut simplex);
    }
}

fn best_of(simplex: &[(Vec<f64>, f64)], evals: usize, converged: bool) -> Minimum {
    let (x, f) = simplex
        .iter()
        .fold(&simplex[0], |b, v| if v.1 < b.1 { v } else { b })
        .clone();
    Minimum { x, f, evals, converged }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateDescentOptions {
    pub max_evals: usize,
    /// Per-axis step below which an axis is considered resolved.
    pub resolution: Vec<f64>,
    pub max_sweeps: usize,
}

/// Cycles over the axes. On each axis it probes `±step`, keeps doubling the
/// step while moving improves, and halves it while neither direction does,
/// down to the axis resolution.
pub fn coordinate_descent(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    opts: &CoordinateDescentOptions,
) -> Minimum {
    let n = x0.len();
    assert_eq!(steps.len(), n, "one step per dimension");
    assert_eq!(opts.resolution.len(), n, "one resolution per dimension");
    let mut evals = 0;
    let mut x = x0.to_vec();
    if opts.max_evals == 0 {
        return Minimum {
            x,
            f: f64::NAN,
            evals,
            converged: false,
        };
    }
    let mut fx = f(&x);
    evals += 1;
    let mut step = steps.to_vec();
    for _ in 0..opts.max_sweeps {
        let mut improved = false;
        for i in 0..n {
            let mut s = step[i];
            'axis: while s >= opts.resolution[i] {
                for dir in [1.0, -1.0] {
                    if evals >= opts.max_evals {
                        return Minimum { x, f: fx, evals, converged: false };
                    }
                    let mut probe = x.clone();
                    probe[i] += dir * s;
                    let fp = f(&probe);
                    evals += 1;
                    if fp < fx {
                        x = probe;
                        fx = fp;
                        improved = true;
                        // keep going while doubling pays off
                        let mut grow = 2.0 * s;
                        while evals < opts.max_evals {
                            let mut further = x.clone();
                            further[i] += dir * grow;
                            let ff = f(&further);
                            evals += 1;
                            if ff < fx {
                                x = further;
                                fx = ff;
                                grow *= 2.0;
                            } else {
                                break;
                            }
                        }
                        break 'axis;
                    }
                }
                s *= 0.5;
            }
            step[i] = s.max(opts.resolution[i]);
        }
        if !improved {
            return Minimum { x, f: fx, evals, converged: true };
        }
    }
    Minimum { x, f: fx, evals, converged: true }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOptions<T> {
    pub eval_budget: usize,
    pub gd_evals: usize,
    pub nm_evals: usize,
    pub cd_evals: usize,
    /// Initial simplex offsets.
    pub simplex_translation: T,
    pub simplex_rotation: T,
    /// Finite-difference deltas.
    pub translation_step: T,
    pub rotation_step: T,
    /// Coordinate-descent stopping resolution.
    pub cd_translation_resolution: T,
    pub cd_rotation_resolution: T,
    /// Internal units per radian (translations are in meters).
    pub angle_scale: T,
    /// Simplex spread (cost units) treated as converged.
    pub convergence_tol: f64,
    /// Candidates whose overlap fraction falls below this share of the
    /// starting pose's are rejected.
    pub min_overlap_ratio: f64,
}

impl<T: Real> Default for OptimizerOptions<T> {
    fn default() -> Self {
        Self {
            eval_budget: 700,
            gd_evals: 100,
            nm_evals: 400,
            cd_evals: 200,
            simplex_translation: T::lit(0.02),
            simplex_rotation: T::lit(1f64.to_radians()),
            translation_step: T::lit(0.005),
            rotation_step: T::lit(0.25f64.to_radians()),
            cd_translation_resolution: T::lit(0.0005),
            cd_rotation_resolution: T::lit(0.025f64.to_radians()),
            angle_scale: T::lit(0.5),
            convergence_tol: 0.0,
            min_overlap_ratio: 0.2,
        }
    }
}

impl<T: Real> OptimizerOptions<T> {
    pub fn validate(&self) -> Result<(), AlignError> {
        let positive = [
            self.simplex_translation,
            self.simplex_rotation,
            self.translation_step,
            self.rotation_step,
            self.cd_translation_resolution,
            self.cd_rotation_resolution,
            self.angle_scale,
        ];
        if positive.iter().any(|v| !(*v > T::zero())) {
            return Err(AlignError::Options("steps, resolutions and scales must be positive".into()));
        }
        if self.eval_budget == 0 {
            return Err(AlignError::Options("eval_budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_overlap_ratio) || self.convergence_tol < 0.0 {
            return Err(AlignError::Options("overlap ratio must be in [0, 1], tolerance ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOptions<T> {
    pub cost: CostOptions<T>,
    pub mesh: MeshifyOptions<T>,
    pub optimizer: OptimizerOptions<T>,
    /// Record every evaluation.
    pub trace: bool,
}

impl<T: Real> Default for AlignOptions<T> {
    fn default() -> Self {
        Self {
            cost: CostOptions::default(),
            mesh: MeshifyOptions::default(),
            optimizer: OptimizerOptions::default(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Start,
    GradientDescent,
    NelderMead,
    CoordinateDescent,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Start => "start",
            Phase::GradientDescent => "gd",
            Phase::NelderMead => "nm",
            Phase::CoordinateDescent => "cd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub eval: usize,
    pub phase: Phase,
    pub pose: [f64; 6],
    pub cost: i64,
    pub overlap: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult<T> {
    pub pose: Pose6D<T>,
    pub cost: i64,
    pub initial_cost: i64,
    pub evaluations: usize,
    pub converged: bool,
    pub rejected_low_overlap: bool,
    /// Best cost at the end of each phase, in phase order.
    pub phase_costs: Vec<(Phase, i64)>,
    pub trace: Vec<TraceRow>,
}

/// Writes a trace as CSV with a header row.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "eval,phase,x,y,z,theta_x,theta_y,theta_z,cost,overlap,rejected")?;
    for r in rows {
        let p = r.pose;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.eval,
            r.phase.name(),
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
            r.cost,
            r.overlap,
            r.rejected as u8
        )?;
    }
    Ok(())
}

/// Fixed scan render: meshify the scan (optionally blurred) and render it from
/// its own camera.
pub fn scan_render<T: Real>(
    scan: &DepthImage<T>,
    cam: &CameraModel<T>,
    opts: &AlignOptions<T>,
) -> Result<LabeledRender<T>, AlignError> {
    let scan = match opts.cost.blur_sigma {
        Some(s) => gaussian_blur_valid(scan, s),
        None => scan.clone(),
    };
    let mesh = meshify(&scan, cam, &opts.mesh)?;
    Ok(render(&[MeshInstance::at_origin(&mesh)], cam, &RigidTransform::identity()))
}

/// Cost evaluator shared by the three phases: counts evaluations, applies
/// the low-overlap rejection, tracks the best pose and records the trace.
struct Objective<'a, T: Real> {
    map: &'a LabeledMesh<T>,
    z_s: &'a LabeledRender<T>,
    cam: &'a CameraModel<T>,
    opts: &'a AlignOptions<T>,
    phase: Phase,
    evals: usize,
    min_overlap: f64,
    best: Option<([f64; 6], i64)>,
    trace: Vec<TraceRow>,
    error: Option<CostError>,
}

impl<T: Real> Objective<'_, T> {
    fn pose_of(&self, v: &[f64]) -> Pose6D<T> {
        let s = self.opts.optimizer.angle_scale.as_f64();
        Pose6D::new(
            T::lit(v[0]),
            T::lit(v[1]),
            T::lit(v[2]),
            T::lit(v[3] / s),
            T::lit(v[4] / s),
            T::lit(v[5] / s),
        )
    }

    fn report(&mut self, v: &[f64]) -> Option<CostReport> {
        let pose = self.pose_of(v);
        self.evals += 1;
        match evaluate_pose(self.map, self.z_s, self.cam, &pose, &self.opts.cost) {
            Ok(r) => Some(r),
            Err(e) => {
                self.error.get_or_insert(e);
                None
            }
        }
    }

    fn eval(&mut self, v: &[f64]) -> f64 {
        let Some(rep) = self.report(v) else {
            return f64::INFINITY;
        };
        let rejected = rep.valid_overlap_fraction < self.min_overlap;
        let pose = self.pose_of(v).to_array().map(|x| x.as_f64());
        if self.opts.trace {
            self.trace.push(TraceRow {
                eval: self.evals,
                phase: self.phase,
                pose,
                cost: rep.total,
                overlap: rep.valid_overlap_fraction,
                rejected,
            });
        }
        if rejected {
            return f64::INFINITY;
        }
        let mut arr = [0.0; 6];
        arr.copy_from_slice(v);
        if self.best.is_none_or(|(_, c)| rep.total < c) {
            self.best = Some((arr, rep.total));
        }
        rep.total as f64
    }

    fn remaining(&self, budget: usize) -> usize {
        budget.saturating_sub(self.evals)
    }
}

/// Estimates the pose of the scan in the map frame, starting from `x0`.
pub fn align<T: Real>(
    map: &LabeledMesh<T>,
    scan: &DepthImage<T>,
    cam: &CameraModel<T>,
    x0: &Pose6D<T>,
    opts: &AlignOptions<T>,
) -> Result<AlignmentResult<T>, AlignError> {
    let z_s = scan_render(scan, cam, opts)?;
    align_rendered(map, &z_s, cam, x0, opts)
}

/// As [`align`] with the scan render already computed.
pub fn align_rendered<T: Real>(
    map: &LabeledMesh<T>,
    z_s: &LabeledRender<T>,
    cam: &CameraModel<T>,
    x0: &Pose6D<T>,
    opts: &AlignOptions<T>,
) -> Result<AlignmentResult<T>, AlignError> {
    let o = &opts.optimizer;
    o.validate()?;
    if map.is_empty() {
        return Err(AlignError::EmptyMap);
    }
    let s = o.angle_scale.as_f64();
    let a = x0.to_array().map(|v| v.as_f64());
    let v0 = [a[0], a[1], a[2], a[3] * s, a[4] * s, a[5] * s];

    let mut obj = Objective {
        map,
        z_s,
        cam,
        opts,
        phase: Phase::Start,
        evals: 0,
        min_overlap: 0.0,
        best: None,
        trace: Vec::new(),
        error: None,
    };
    let start = obj.report(&v0).ok_or_else(|| obj.error.clone().unwrap())?;
    if opts.trace {
        obj.trace.push(TraceRow {
            eval: 1,
            phase: Phase::Start,
            pose: a,
            cost: start.total,
            overlap: start.valid_overlap_fraction,
            rejected: false,
        });
    }
    let mut result = AlignmentResult {
        pose: *x0,
        cost: start.total,
        initial_cost: start.total,
        evaluations: 1,
        converged: false,
        rejected_low_overlap: false,
        phase_costs: vec![(Phase::Start, start.total)],
        trace: Vec::new(),
    };
    if start.valid_overlap_fraction <= 0.0 {
        // pointing away from the map: the empty render is a spurious minimum
        result.rejected_low_overlap = true;
        result.trace = obj.trace;
        return Ok(result);
    }
    obj.min_overlap = o.min_overlap_ratio * start.valid_overlap_fraction;
    obj.best = Some((v0, start.total));

    let budget = o.eval_budget;
    let ts = o.translation_step.as_f64();
    let rs = o.rotation_step.as_f64() * s;
    let deltas = [ts, ts, ts, rs, rs, rs];

    // finite-difference gradient descent with a doubling/halving line search
    obj.phase = Phase::GradientDescent;
    let gd_budget = (1 + o.gd_evals).min(budget);
    let mut x = v0;
    let mut fx = start.total as f64;
    let mut alpha = 0.02;
    while obj.evals + 13 <= gd_budget {
        let mut g = [0.0; 6];
        for i in 0..6 {
            let mut p = x;
            p[i] += deltas[i];
            let fp = obj.eval(&p);
            let mut m = x;
            m[i] -= deltas[i];
            let fm = obj.eval(&m);
            g[i] = if fp.is_finite() && fm.is_finite() {
                (fp - fm) / (2.0 * deltas[i])
            } else {
                0.0
            };
        }
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn == 0.0 {
            break;
        }
        let dir = g.map(|v| -v / gn);
        let base = x;
        let step_to = move |t: f64| {
            let mut p = base;
            for i in 0..6 {
                p[i] += t * dir[i];
            }
            p
        };
        let mut moved = false;
        let mut t = alpha;
        for _ in 0..4 {
            if obj.evals >= gd_budget {
                break;
            }
            let p = step_to(t);
            let fp = obj.eval(&p);
            if fp < fx {
                x = p;
                fx = fp;
                moved = true;
                // expand while it keeps paying off
                while obj.evals < gd_budget {
                    let q = step_to(2.0 * t);
                    let fq = obj.eval(&q);
                    if fq < fx {
                        t *= 2.0;
                        x = q;
                        fx = fq;
                    } else {
                        break;
                    }
                }
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        alpha = t;
    }
    result.phase_costs.push((Phase::GradientDescent, obj.best.unwrap().1));

    // Nelder-Mead around the best point so far
    obj.phase = Phase::NelderMead;
    let st = o.simplex_translation.as_f64();
    let sr = o.simplex_rotation.as_f64() * s;
    let nm_end = (obj.evals + o.nm_evals).min(budget);
    // restart from the best vertex with a fresh simplex while that keeps
    // improving; a collapsed simplex on a plateau says little about the minimum
    let mut nm_converged = false;
    loop {
        let before = obj.best.unwrap().1;
        let nm_opts = NelderMeadOptions {
            max_evals: nm_end.saturating_sub(obj.evals),
            ftol: o.convergence_tol,
            xtol: o.cd_translation_resolution.as_f64(),
        };
        if nm_opts.max_evals <= 7 {
            break;
        }
        let from = obj.best.unwrap().0;
        let nm = nelder_mead(|v| obj.eval(v), &from, &[st, st, st, sr, sr, sr], &nm_opts);
        nm_converged = nm.converged;
        if !nm.converged || obj.best.unwrap().1 >= before {
            break;
        }
    }
    result.phase_costs.push((Phase::NelderMead, obj.best.unwrap().1));

    // coordinate descent polish
    obj.phase = Phase::CoordinateDescent;
    let tr = o.cd_translation_resolution.as_f64();
    let rr = o.cd_rotation_resolution.as_f64() * s;
    let cd_opts = CoordinateDescentOptions {
        max_evals: o.cd_evals.min(obj.remaining(budget)),
        resolution: vec![tr, tr, tr, rr, rr, rr],
        max_sweeps: usize::MAX,
    };
    let from = obj.best.unwrap().0;
    let cd = coordinate_descent(|v| obj.eval(v), &from, &deltas, &cd_opts);
    result.phase_costs.push((Phase::CoordinateDescent, obj.best.unwrap().1));

    if let Some(e) = obj.error.take() {
        return Err(e.into());
    }
    let (bv, bc) = obj.best.unwrap();
    result.pose = obj.pose_of(&bv);
    result.cost = bc;
    result.evaluations = obj.evals;
    result.converged = (nm_converged || cd.converged) && !(bc == start.total && obj.evals >= budget);
    result.trace = obj.trace;
    Ok(result)
}

/// Cost along one pose axis: `center` offset by `k·step` for `|k·step| ≤ half_range`.
pub fn cost_profile<T: Real>(
    map: &LabeledMesh<T>,
    z_s: &LabeledRender<T>,
    cam: &CameraModel<T>,
    center: &Pose6D<T>,
    axis: usize,
    half_range: T,
    step: T,
    opts: &CostOptions<T>,
) -> Result<Vec<(T, i64)>, CostError> {
    let n = (half_range / step).round().to_i64().unwrap_or(0);
    let mut out = Vec::with_capacity(2 * n as usize + 1);
    for k in -n..=n {
        let off = step * T::from_i64(k).unwrap();
        let mut a = center.to_array();
        a[axis] += off;
        out.push((off, evaluate_pose(map, z_s, cam, &Pose6D::from_array(a), opts)?.total));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneSpec;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn nm_quadratic() {
        let x0 = [1.0, -2.0, 0.5, 0.3, -0.7, 1.5];
        let r = nelder_mead(sphere, &x0, &[0.5; 6], &NelderMeadOptions::default());
        assert!(r.f < 1e-6, "{r:?}");
        assert!(r.evals <= 500);
        assert!(r.f <= sphere(&x0));
    }

    #[test]
    fn nm_rosenbrock_embedded() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2) + sphere(&x[2..]);
        let opts = NelderMeadOptions {
            max_evals: 5000,
            ..NelderMeadOptions::default()
        };
        let r = nelder_mead(f, &[-1.2, 1.0, 0.0, 0.0, 0.0, 0.0], &[0.1; 6], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn nm_at_minimum() {
        let r = nelder_mead(sphere, &[0.0; 6], &[0.1; 6], &NelderMeadOptions::default());
        assert_eq!(r.f, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn nm_budget() {
        let opts = NelderMeadOptions {
            max_evals: 20,
            ..NelderMeadOptions::default()
        };
        let r = nelder_mead(sphere, &[3.0; 6], &[0.1; 6], &opts);
        assert!(!r.converged);
        assert!(r.evals <= 20);
        assert!(r.f <= 54.0);
    }

    fn cd_opts(res: f64) -> CoordinateDescentOptions {
        CoordinateDescentOptions {
            max_evals: 10_000,
            resolution: vec![res; 2],
            max_sweeps: 100,
        }
    }

    #[test]
    fn cd_separable() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + (x[1] + 0.7).powi(2);
        let r = coordinate_descent(f, &[0.0, 0.0], &[0.1, 0.1], &cd_opts(1e-3));
        assert!((r.x[0] - 0.3).abs() < 1e-3 && (r.x[1] + 0.7).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn cd_constant() {
        let r = coordinate_descent(|_| 1.0, &[0.5, -0.5], &[0.1, 0.1], &cd_opts(1e-3));
        assert_eq!(r.x, vec![0.5, -0.5]);
        assert!(r.converged);
    }

    #[test]
    fn cd_valley_in_three_sweeps() {
        let f = |x: &[f64]| x[0] * x[0] + 100.0 * x[1] * x[1];
        let opts = CoordinateDescentOptions {
            max_sweeps: 3,
            ..cd_opts(1e-3)
        };
        let r = coordinate_descent(f, &[0.8, -0.4], &[0.1, 0.1], &opts);
        assert!(r.x[0].abs() < 1e-3 && r.x[1].abs() < 1e-3, "{r:?}");
    }

    struct Room {
        cam: CameraModel<f64>,
        map: LabeledMesh<f64>,
        z_s: LabeledRender<f64>,
    }

    /// Map from frame 0 of the room; scan seen from `truth`.
    fn room(truth: &Pose6D<f64>) -> Room {
        let mut spec = SceneSpec::<f64>::canned("room").unwrap();
        spec.trajectory = vec![(0.0, Pose6D::identity()), (1.0, *truth)];
        let cam = spec.camera;
        let opts = AlignOptions::default();
        let map = meshify(&spec.render_frame(0).unwrap(), &cam, &opts.mesh).unwrap();
        let z_s = scan_render(&spec.render_frame(1).unwrap(), &cam, &opts).unwrap();
        Room { cam, map, z_s }
    }

    #[test]
    fn truth_start_stays_at_truth() {
        let r = room(&Pose6D::identity());
        let res = align_rendered(&r.map, &r.z_s, &r.cam, &Pose6D::identity(), &AlignOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.cost, res.initial_cost);
        assert!(res.pose.translation().norm() < 1e-3);
    }

    #[test]
    fn recovers_displaced_room_pose() {
        let truth = Pose6D::new(0.1, 0.05, 0.0, 0.0, 0.0, 5f64.to_radians());
        let r = room(&truth);
        let opts = AlignOptions {
            trace: true,
            ..AlignOptions::default()
        };
        let res = align_rendered(&r.map, &r.z_s, &r.cam, &Pose6D::identity(), &opts).unwrap();
        let err = truth.to_transform().inverse().compose(&res.pose.to_transform());
        assert!(err.translation.norm() < 0.01, "{} {:?}", err.translation.norm(), res.phase_costs);
        assert!(err.rotation_angle() < 0.5f64.to_radians());
        assert!(res.evaluations <= 700);
        assert_eq!(res.trace.len(), res.evaluations);
        // cost matches a fresh evaluation and the best-so-far never rises
        let again = evaluate_pose(&r.map, &r.z_s, &r.cam, &res.pose, &opts.cost).unwrap();
        assert_eq!(again.total, res.cost);
        assert!(res.phase_costs.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn deterministic() {
        let truth = Pose6D::new(0.03, -0.02, 0.04, 0.01, -0.02, 0.0);
        let r = room(&truth);
        let opts = AlignOptions {
            optimizer: OptimizerOptions {
                eval_budget: 150,
                ..OptimizerOptions::default()
            },
            ..AlignOptions::default()
        };
        let a = align_rendered(&r.map, &r.z_s, &r.cam, &Pose6D::identity(), &opts).unwrap();
        let b = align_rendered(&r.map, &r.z_s, &r.cam, &Pose6D::identity(), &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.evaluations <= 150);
    }

    #[test]
    fn facing_away_is_rejected() {
        let r = room(&Pose6D::identity());
        let away = Pose6D::new(0.0, 0.0, 0.0, 0.0, std::f64::consts::PI, 0.0);
        let res = align_rendered(&r.map, &r.z_s, &r.cam, &away, &AlignOptions::default()).unwrap();
        assert!(res.rejected_low_overlap);
        assert!(!res.converged);
    }

    #[test]
    fn empty_map_is_an_error() {
        let r = room(&Pose6D::identity());
        let empty = LabeledMesh::new();
        assert!(matches!(
            align_rendered(&empty, &r.z_s, &r.cam, &Pose6D::identity(), &AlignOptions::default()),
            Err(AlignError::EmptyMap)
        ));
    }

    #[test]
    fn angle_scaling_is_internal() {
        // a pure rotation offset comes back in radians
        let truth = Pose6D::new(0.0, 0.0, 0.0, 0.0, 2f64.to_radians(), 0.0);
        let r = room(&truth);
        let res = align_rendered(&r.map, &r.z_s, &r.cam, &Pose6D::identity(), &AlignOptions::default()).unwrap();
        assert!((res.pose.theta_y - truth.theta_y).abs() < 0.25f64.to_radians(), "{:?}", res.pose);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = vec![TraceRow {
            eval: 1,
            phase: Phase::NelderMead,
            pose: [0.0; 6],
            cost: -5,
            overlap: 0.5,
            rejected: false,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("eval,phase,"));
        assert!(s.contains("1,nm,0,0,0,0,0,0,-5,0.5,0"));
    }
}
