//! Position fixes from ranges (circles) or arrival-time differences (hyperbolas).

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Dyn, Matrix2, OMatrix, U2, Vector2, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{distance, Bounds, Position, SPEED_OF_LIGHT};
use crate::layout::{NodeId, SystemLayout};
use crate::tdoa::TdoaMeasurement;
use crate::twr::RangeMeasurement;

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOLERANCE_M: f64 = 1e-10;
pub const RESIDUAL_TOLERANCE: f64 = 1e-12;
/// Closed-form fixes whose circles miss by more than this are flagged.
pub const CONSISTENCY_TOLERANCE_M: f64 = 1e-6;

const GRADIENT_TOLERANCE: f64 = 1e-10;
/// Distinct minima closer than this are the same fix.
const DISTINCT_MINIMA_M: f64 = 1e-3;
/// Relative cost gap below which two minima are indistinguishable.
const COMPARABLE_COST: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("anchors are collinear")]
    CollinearAnchors,
    #[error("need at least {needed} measurements, found {found}")]
    TooFewMeasurements { needed: usize, found: usize },
    #[error("measurement refers to unknown anchor {0}")]
    UnknownAnchor(NodeId),
    #[error("no start converged within {iterations} iterations")]
    DidNotConverge { iterations: usize },
    #[error("anchor geometry cannot resolve the hyperbola branches")]
    DegenerateGeometry,
    #[error("Jacobian is undefined at an anchor position")]
    SingularPoint,
    #[error("non-finite measurement")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Powell's conjugate-direction search with bounded line minimization.
    DerivativeFree,
    /// Projected BFGS with Armijo backtracking.
    QuasiNewton,
    /// Bounded Levenberg-Marquardt trust region.
    #[default]
    LeastSquares,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DerivativeFree, Method::QuasiNewton, Method::LeastSquares];

    pub fn name(self) -> &'static str {
        match self {
            Method::DerivativeFree => "derivative_free",
            Method::QuasiNewton => "quasi_newton",
            Method::LeastSquares => "least_squares",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Measurements {
    Ranges(Vec<RangeMeasurement>),
    Tdoa(Vec<TdoaMeasurement>),
}

impl Measurements {
    pub fn len(&self) -> usize {
        match self {
            Measurements::Ranges(v) => v.len(),
            Measurements::Tdoa(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveRequest {
    pub anchors: BTreeMap<NodeId, Position>,
    pub measurements: Measurements,
    /// Last fix, used as a warm start and to pick between mirror solutions.
    pub prior: Option<Position>,
    pub bounds: Bounds,
}

impl SolveRequest {
    pub fn new(layout: &SystemLayout, measurements: Measurements) -> Self {
        SolveRequest {
            anchors: layout.anchor_positions().into_iter().collect(),
            measurements,
            prior: None,
            bounds: layout.bounds,
        }
    }

    pub fn with_prior(mut self, prior: Option<Position>) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub position: Position,
    /// Root-sum-square of the per-measurement distance mismatch, meters.
    pub residual_norm: f64,
    /// Objective value at `position`.
    pub cost: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub converged: bool,
    /// Another in-bounds minimum fits equally well and no prior chose between them.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormFix {
    pub position: Position,
    /// Largest `|distance - range|` over the three anchors.
    pub max_residual: f64,
    pub inconsistent: bool,
}

/// Intersects three circles by subtracting the first circle equation from
/// the other two, which leaves a 2x2 linear system.
pub fn trilaterate_closed_form(
    anchors: [Position; 3],
    ranges: [f64; 3],
) -> Result<ClosedFormFix, SolveError> {
    if anchors.iter().any(|a| !a.is_finite()) || ranges.iter().any(|r| !r.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    let [p1, p2, p3] = anchors;
    let a = Matrix2::new(
        2.0 * (p2.x - p1.x),
        2.0 * (p2.y - p1.y),
        2.0 * (p3.x - p1.x),
        2.0 * (p3.y - p1.y),
    );
    let scale = (distance(p1, p2).max(distance(p1, p3))).powi(2).max(1e-300);
    if a.determinant().abs() <= 1e-10 * scale {
        return Err(SolveError::CollinearAnchors);
    }
    let b = Vector2::new(
        p2.dot(&p2) - p1.dot(&p1) - (ranges[1].powi(2) - ranges[0].powi(2)),
        p3.dot(&p3) - p1.dot(&p1) - (ranges[2].powi(2) - ranges[0].powi(2)),
    );
    let x = a.lu().solve(&b).ok_or(SolveError::CollinearAnchors)?;
    let position = Position::new(x[0], x[1]);
    let max_residual = anchors
        .iter()
        .zip(ranges)
        .map(|(a, r)| (distance(*a, position) - r).abs())
        .fold(0.0, f64::max);
    Ok(ClosedFormFix {
        position,
        max_residual,
        inconsistent: max_residual > CONSISTENCY_TOLERANCE_M,
    })
}

#[derive(Debug, Clone, Copy)]
enum Term {
    /// `r^2 - |p_k - p|^2`
    Range { anchor: Position, range: f64 },
    /// `c dt - (|p - p_k| - |p - p_l|)`
    Tdoa { k: Position, l: Position, path: f64 },
}

#[derive(Debug, Clone)]
struct Problem {
    terms: Vec<Term>,
    bounds: Bounds,
}

impl Problem {
    fn from_request(req: &SolveRequest) -> Result<Problem, SolveError> {
        let lookup = |id: NodeId| req.anchors.get(&id).copied().ok_or(SolveError::UnknownAnchor(id));
        let terms = match &req.measurements {
            Measurements::Ranges(v) => v
                .iter()
                .map(|m| {
                    if !m.range.is_finite() {
                        return Err(SolveError::NonFinite);
                    }
                    Ok(Term::Range {
                        anchor: lookup(m.anchor)?,
                        range: m.range,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            Measurements::Tdoa(v) => v
                .iter()
                .map(|m| {
                    if !m.dt.is_finite() {
                        return Err(SolveError::NonFinite);
                    }
                    Ok(Term::Tdoa {
                        k: lookup(m.anchor_k)?,
                        l: lookup(m.anchor_l)?,
                        path: SPEED_OF_LIGHT * m.dt,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(Problem {
            terms,
            bounds: req.bounds,
        })
    }

    fn residual(term: &Term, p: Position) -> f64 {
        match *term {
            Term::Range { anchor, range } => {
                let d = anchor - p;
                range * range - d.dot(&d)
            }
            Term::Tdoa { k, l, path } => path - (distance(p, k) - distance(p, l)),
        }
    }

    /// Mismatch expressed as a distance, for reporting.
    fn distance_residual(term: &Term, p: Position) -> f64 {
        match *term {
            Term::Range { anchor, range } => distance(anchor, p) - range,
            Term::Tdoa { .. } => Problem::residual(term, p),
        }
    }

    fn cost(&self, p: Position) -> f64 {
        self.terms.iter().map(|t| Problem::residual(t, p).powi(2)).sum()
    }

    fn residual_norm(&self, p: Position) -> f64 {
        self.terms
            .iter()
            .map(|t| Problem::distance_residual(t, p).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn jacobian_row(term: &Term, p: Position) -> Result<[f64; 2], SolveError> {
        match *term {
            Term::Range { anchor, .. } => Ok([2.0 * (anchor.x - p.x), 2.0 * (anchor.y - p.y)]),
            Term::Tdoa { k, l, .. } => {
                let dk = distance(p, k);
                let dl = distance(p, l);
                if dk < 1e-12 || dl < 1e-12 {
                    return Err(SolveError::SingularPoint);
                }
                let uk = (p - k) * (1.0 / dk);
                let ul = (p - l) * (1.0 / dl);
                Ok([-(uk.x - ul.x), -(uk.y - ul.y)])
            }
        }
    }

    /// Residuals, Jacobian rows, cost and gradient of the cost.
    fn linearize(&self, p: Position) -> Result<Linearization, SolveError> {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        let mut cost = 0.0;
        for t in &self.terms {
            let r = Problem::residual(t, p);
            let row = Problem::jacobian_row(t, p)?;
            let j = Vector2::new(row[0], row[1]);
            jtj += j * j.transpose();
            jtr += j * r;
            cost += r * r;
        }
        Ok(Linearization { jtj, jtr, cost })
    }

    fn gradient(&self, p: Position) -> Result<Vector2<f64>, SolveError> {
        Ok(self.linearize(p)?.jtr * 2.0)
    }

    fn clamp(&self, p: Position) -> Position {
        self.bounds.clamp(p)
    }

    /// Gradient with the components that push against an active bound removed.
    fn projected_gradient(&self, p: Position, g: Vector2<f64>) -> Vector2<f64> {
        let mut out = g;
        for i in 0..2 {
            let (lo, hi) = self.bounds.axis(i);
            let v = if i == 0 { p.x } else { p.y };
            if (v <= lo && g[i] > 0.0) || (v >= hi && g[i] < 0.0) {
                out[i] = 0.0;
            }
        }
        out
    }
}

struct Linearization {
    jtj: Matrix2<f64>,
    jtr: Vector2<f64>,
    cost: f64,
}

#[derive(Debug, Clone, Copy)]
struct LocalResult {
    position: Position,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn to_vec(p: Position) -> Vector2<f64> {
    Vector2::new(p.x, p.y)
}

fn to_pos(v: Vector2<f64>) -> Position {
    Position::new(v[0], v[1])
}

/// Nudges a point off any anchor, where the hyperbolic Jacobian is undefined.
fn off_anchor(problem: &Problem, p: Position) -> Position {
    let hits = problem.terms.iter().any(|t| match *t {
        Term::Tdoa { k, l, .. } => distance(p, k) < 1e-9 || distance(p, l) < 1e-9,
        Term::Range { .. } => false,
    });
    if hits {
        problem.clamp(p + Position::new(1e-6, 1e-6))
    } else {
        p
    }
}

fn converged_at(problem: &Problem, p: Position, lin: &Linearization) -> bool {
    let pg = problem.projected_gradient(p, lin.jtr * 2.0);
    lin.cost.sqrt() < RESIDUAL_TOLERANCE || pg.norm() <= GRADIENT_TOLERANCE * (1.0 + lin.cost)
}

fn levenberg_marquardt(problem: &Problem, start: Position) -> Result<LocalResult, SolveError> {
    let mut p = off_anchor(problem, problem.clamp(start));
    let mut lin = problem.linearize(p)?;
    let mut lambda = 1e-3 * lin.jtj.diagonal().max().max(1e-12);
    let mut nu = 2.0;
    for iter in 0..MAX_ITERATIONS {
        if converged_at(problem, p, &lin) {
            return Ok(LocalResult { position: p, cost: lin.cost, iterations: iter, converged: true });
        }
        // Freeze coordinates held at a bound by the gradient.
        let g = lin.jtr;
        let pg = problem.projected_gradient(p, g * 2.0);
        let free = [pg[0] != 0.0 || g[0] == 0.0, pg[1] != 0.0 || g[1] == 0.0];
        let mut a = lin.jtj + Matrix2::from_diagonal(&lin.jtj.diagonal()) * lambda
            + Matrix2::identity() * (lambda * 1e-12);
        let mut rhs = -g;
        for i in 0..2 {
            if !free[i] {
                a[(i, 0)] = 0.0;
                a[(0, i)] = 0.0;
                a[(i, 1)] = 0.0;
                a[(1, i)] = 0.0;
                a[(i, i)] = 1.0;
                rhs[i] = 0.0;
            }
        }
        let Some(delta) = a.lu().solve(&rhs) else {
            lambda *= nu;
            nu *= 2.0;
            continue;
        };
        let candidate = off_anchor(problem, problem.clamp(to_pos(to_vec(p) + delta)));
        let step = to_vec(candidate) - to_vec(p);
        let step_norm = step.norm();
        if step_norm <= STEP_TOLERANCE_M * (1.0 + to_vec(p).norm()) {
            let converged = lambda < 1e6 * (1.0 + lin.jtj.diagonal().max());
            return Ok(LocalResult { position: p, cost: lin.cost, iterations: iter + 1, converged });
        }
        // Model reduction for the clamped step.
        let predicted = -(2.0 * g.dot(&step) + step.dot(&(lin.jtj * step)));
        let new_cost = problem.cost(candidate);
        let actual = lin.cost - new_cost;
        if actual > 0.0 && predicted > 0.0 {
            let rho = actual / predicted;
            p = candidate;
            lin = problem.linearize(p)?;
            lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
        } else {
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e30 {
                let converged = problem.projected_gradient(p, lin.jtr * 2.0).norm()
                    <= 1e-6 * (1.0 + lin.cost);
                return Ok(LocalResult { position: p, cost: lin.cost, iterations: iter + 1, converged });
            }
        }
    }
    let converged = converged_at(problem, p, &lin);
    Ok(LocalResult { position: p, cost: lin.cost, iterations: MAX_ITERATIONS, converged })
}

fn projected_bfgs(problem: &Problem, start: Position) -> Result<LocalResult, SolveError> {
    let mut p = off_anchor(problem, problem.clamp(start));
    let mut f = problem.cost(p);
    let mut g = problem.gradient(p)?;
    let mut h = Matrix2::identity() / g.norm().max(1.0);
    for iter in 0..MAX_ITERATIONS {
        let pg = problem.projected_gradient(p, g);
        if f.sqrt() < RESIDUAL_TOLERANCE || pg.norm() <= GRADIENT_TOLERANCE * (1.0 + f) {
            return Ok(LocalResult { position: p, cost: f, iterations: iter, converged: true });
        }
        let mut d = -(h * pg);
        for i in 0..2 {
            if pg[i] == 0.0 {
                d[i] = 0.0;
            }
        }
        if d.dot(&pg) >= 0.0 {
            h = Matrix2::identity() / pg.norm().max(1e-12);
            d = -(h * pg);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = off_anchor(problem, problem.clamp(to_pos(to_vec(p) + d * alpha)));
            let s = to_vec(cand) - to_vec(p);
            let fc = problem.cost(cand);
            if fc <= f + 1e-4 * g.dot(&s) && fc <= f {
                accepted = Some((cand, fc, s));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, fc, s)) = accepted else {
            let converged = pg.norm() <= 1e-6 * (1.0 + f);
            return Ok(LocalResult { position: p, cost: f, iterations: iter + 1, converged });
        };
        let g_new = problem.gradient(cand)?;
        let y = g_new - g;
        let sy = s.dot(&y);
        if sy > 1e-18 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let i = Matrix2::identity();
            h = (i - s * y.transpose() * rho) * h * (i - y * s.transpose() * rho)
                + s * s.transpose() * rho;
        }
        let small_step = s.norm() <= STEP_TOLERANCE_M * (1.0 + to_vec(p).norm());
        p = cand;
        f = fc;
        g = g_new;
        if small_step {
            let pg = problem.projected_gradient(p, g);
            return Ok(LocalResult {
                position: p,
                cost: f,
                iterations: iter + 1,
                converged: pg.norm() <= 1e-6 * (1.0 + f),
            });
        }
    }
    let pg = problem.projected_gradient(p, g);
    Ok(LocalResult {
        position: p,
        cost: f,
        iterations: MAX_ITERATIONS,
        converged: pg.norm() <= GRADIENT_TOLERANCE * (1.0 + f),
    })
}

/// Feasible parameter range `[lo, hi]` for `p + t d` inside the bounds.
fn feasible_interval(bounds: &Bounds, p: Vector2<f64>, d: Vector2<f64>) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..2 {
        if d[i].abs() < 1e-300 {
            continue;
        }
        let (bl, bh) = bounds.axis(i);
        let a = (bl - p[i]) / d[i];
        let b = (bh - p[i]) / d[i];
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (lo.min(0.0), hi.max(0.0))
}

/// Brackets a minimum of `f(t)` near 0 inside `[lo, hi]`, then golden-section search.
fn line_minimize(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, initial_step: f64) -> (f64, f64) {
    const GOLD: f64 = 0.618_033_988_749_894_9;
    let f0 = f(0.0);
    let mut step = initial_step.max(1e-9);
    let mut bracket = None;
    'search: for _ in 0..40 {
        for dir in [1.0, -1.0] {
            let limit = if dir > 0.0 { hi } else { lo };
            if limit == 0.0 {
                continue;
            }
            let t1 = (dir * step).clamp(lo, hi);
            let f1 = f(t1);
            if f1 < f0 {
                // Expand until the function turns up or the bound is reached.
                let (mut a, mut b, mut fb) = (0.0, t1, f1);
                loop {
                    let c = (b + (b - a) * 1.618).clamp(lo, hi);
                    if c == b {
                        bracket = Some((a, c));
                        break 'search;
                    }
                    let fc = f(c);
                    if fc >= fb {
                        bracket = Some((a, c));
                        break 'search;
                    }
                    a = b;
                    b = c;
                    fb = fc;
                }
            }
        }
        step *= 0.1;
        if step < 1e-14 {
            break;
        }
    }
    let Some((a, c)) = bracket else {
        return (0.0, f0);
    };
    let (mut a, mut c) = if a < c { (a, c) } else { (c, a) };
    let mut x1 = c - GOLD * (c - a);
    let mut x2 = a + GOLD * (c - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (c - a).abs() > 1e-13 * (1.0 + x1.abs()) {
        if f1 < f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - GOLD * (c - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLD * (c - a);
            f2 = f(x2);
        }
    }
    let (t, ft) = if f1 < f2 { (x1, f1) } else { (x2, f2) };
    if ft < f0 {
        (t, ft)
    } else {
        (0.0, f0)
    }
}

fn powell(problem: &Problem, start: Position) -> Result<LocalResult, SolveError> {
    let mut p = to_vec(problem.clamp(start));
    let mut f = problem.cost(to_pos(p));
    let mut dirs = [Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
    let scale = problem.bounds.width().max(problem.bounds.height()).min(10.0);
    let mut step = 0.1 * scale;
    for iter in 0..MAX_ITERATIONS {
        let p_start = p;
        let f_start = f;
        let mut biggest = (0usize, 0.0f64);
        for (i, d) in dirs.iter().enumerate() {
            let (lo, hi) = feasible_interval(&problem.bounds, p, *d);
            let (t, ft) = line_minimize(&|t| problem.cost(to_pos(p + d * t)), lo, hi, step);
            if f - ft > biggest.1 {
                biggest = (i, f - ft);
            }
            p = to_vec(problem.clamp(to_pos(p + d * t)));
            f = problem.cost(to_pos(p));
        }
        let moved = p - p_start;
        let mv = moved.norm();
        if mv > 0.0 {
            let d = moved / mv;
            let (lo, hi) = feasible_interval(&problem.bounds, p, d);
            let (t, ft) = line_minimize(&|t| problem.cost(to_pos(p + d * t)), lo, hi, mv);
            if ft < f {
                p = to_vec(problem.clamp(to_pos(p + d * t)));
                f = problem.cost(to_pos(p));
            }
            dirs[biggest.0] = dirs[1 - biggest.0];
            dirs[1] = d;
            step = mv.max(1e-6);
        }
        let total = (p - p_start).norm();
        if f.sqrt() < RESIDUAL_TOLERANCE
            || total <= STEP_TOLERANCE_M * (1.0 + p.norm())
            || 2.0 * (f_start - f).abs() <= 1e-15 * (f_start.abs() + f.abs()) + 1e-30
        {
            return Ok(LocalResult { position: to_pos(p), cost: f, iterations: iter + 1, converged: true });
        }
        // Directions can collapse; reset to the axes when they do.
        if dirs[0].dot(&dirs[1]).abs() > 1.0 - 1e-10 {
            dirs = [Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
        }
    }
    Ok(LocalResult { position: to_pos(p), cost: f, iterations: MAX_ITERATIONS, converged: false })
}

fn run_local(problem: &Problem, start: Position, method: Method) -> Result<LocalResult, SolveError> {
    match method {
        Method::LeastSquares => levenberg_marquardt(problem, start),
        Method::QuasiNewton => projected_bfgs(problem, start),
        Method::DerivativeFree => powell(problem, start),
    }
}

fn anchors_collinear(points: &[Position]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let scale = points
        .iter()
        .flat_map(|a| points.iter().map(move |b| distance(*a, *b)))
        .fold(0.0, f64::max);
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate().skip(i + 1) {
            for c in points.iter().skip(j + 1) {
                let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                if cross.abs() > 1e-9 * scale * scale {
                    return false;
                }
            }
        }
    }
    true
}

/// Linear least-squares fix from all circles, differenced against the first.
fn linearized_start(terms: &[Term]) -> Option<Position> {
    let circles: Vec<(Position, f64)> = terms
        .iter()
        .filter_map(|t| match *t {
            Term::Range { anchor, range } => Some((anchor, range)),
            _ => None,
        })
        .collect();
    if circles.len() < 3 {
        return None;
    }
    let (p1, r1) = circles[0];
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for &(pk, rk) in &circles[1..] {
        let row = Vector2::new(2.0 * (pk.x - p1.x), 2.0 * (pk.y - p1.y));
        let b = pk.dot(&pk) - p1.dot(&p1) - (rk * rk - r1 * r1);
        ata += row * row.transpose();
        atb += row * b;
    }
    ata.lu().solve(&atb).map(to_pos).filter(|p| p.is_finite())
}

fn starts(problem: &Problem, req: &SolveRequest) -> Vec<Position> {
    let mut out = Vec::new();
    if let Some(p) = req.prior {
        out.push(p);
    }
    let anchors: Vec<Position> = req.anchors.values().copied().collect();
    let n = anchors.len().max(1) as f64;
    let centroid = anchors.iter().fold(Position::default(), |acc, a| acc + *a) * (1.0 / n);
    out.push(centroid);
    if let Some(p) = linearized_start(&problem.terms) {
        out.push(p);
    }
    // A coarse lattice over the bounds, or around the anchors when unbounded.
    let (lo, hi) = if req.bounds.width() < 1e6 && req.bounds.height() < 1e6 {
        (req.bounds.min(), req.bounds.max())
    } else {
        let span = anchors
            .iter()
            .map(|a| distance(*a, centroid))
            .fold(1.0, f64::max);
        (
            centroid - Position::new(2.0 * span, 2.0 * span),
            centroid + Position::new(2.0 * span, 2.0 * span),
        )
    };
    for i in 0..3 {
        for j in 0..3 {
            let fx = (i as f64 + 0.5) / 3.0;
            let fy = (j as f64 + 0.5) / 3.0;
            out.push(Position::new(lo.x + fx * (hi.x - lo.x), lo.y + fy * (hi.y - lo.y)));
        }
    }
    out.into_iter().map(|p| problem.clamp(p)).collect()
}

fn solve_with(req: &SolveRequest, problem: &Problem, method: Method) -> Result<SolveResult, SolveError> {
    let started = Instant::now();
    let mut results = Vec::new();
    let mut total_iterations = 0;
    for s in starts(problem, req) {
        let r = run_local(problem, s, method)?;
        total_iterations += r.iterations;
        if r.converged {
            results.push(r);
        }
    }
    if results.is_empty() {
        return Err(SolveError::DidNotConverge { iterations: total_iterations });
    }
    let best_cost = results.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min);
    let threshold = best_cost * (1.0 + COMPARABLE_COST) + 1e-12;
    let mut candidates: Vec<LocalResult> = Vec::new();
    let mut sorted = results.clone();
    sorted.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    for r in sorted.into_iter().filter(|r| r.cost <= threshold) {
        if candidates
            .iter()
            .all(|c| distance(c.position, r.position) > DISTINCT_MINIMA_M)
        {
            candidates.push(r);
        }
    }
    let (chosen, ambiguous) = match (candidates.len(), req.prior) {
        (1, _) => (candidates[0], false),
        (_, Some(prior)) => {
            let nearest = *candidates
                .iter()
                .min_by(|a, b| {
                    distance(a.position, prior).total_cmp(&distance(b.position, prior))
                })
                .expect("non-empty");
            (nearest, false)
        }
        (_, None) => (candidates[0], true),
    };
    Ok(SolveResult {
        position: chosen.position,
        residual_norm: problem.residual_norm(chosen.position),
        cost: chosen.cost,
        iterations: chosen.iterations,
        wall_time: started.elapsed().as_secs_f64(),
        converged: !ambiguous,
        ambiguous,
    })
}

/// Minimizes the summed squared circle residuals `(r_k^2 - |p_k - p|^2)^2` inside the bounds.
pub fn solve_twr(req: &SolveRequest, method: Method) -> Result<SolveResult, SolveError> {
    let Measurements::Ranges(ranges) = &req.measurements else {
        return Err(SolveError::TooFewMeasurements { needed: 2, found: 0 });
    };
    let distinct: std::collections::BTreeSet<NodeId> = ranges.iter().map(|r| r.anchor).collect();
    if distinct.len() < 2 {
        return Err(SolveError::TooFewMeasurements { needed: 2, found: distinct.len() });
    }
    let problem = Problem::from_request(req)?;
    solve_with(req, &problem, method)
}

/// Minimizes the summed squared hyperbola residuals with the bounded trust region.
pub fn solve_tdoa(req: &SolveRequest) -> Result<SolveResult, SolveError> {
    solve_tdoa_with(req, Method::LeastSquares)
}

pub fn solve_tdoa_with(req: &SolveRequest, method: Method) -> Result<SolveResult, SolveError> {
    let Measurements::Tdoa(pairs) = &req.measurements else {
        return Err(SolveError::TooFewMeasurements { needed: 2, found: 0 });
    };
    if pairs.len() < 2 {
        return Err(SolveError::TooFewMeasurements { needed: 2, found: pairs.len() });
    }
    let mut used = std::collections::BTreeSet::new();
    for m in pairs {
        used.insert(m.anchor_k);
        used.insert(m.anchor_l);
    }
    let points: Vec<Position> = used
        .iter()
        .map(|id| req.anchors.get(id).copied().ok_or(SolveError::UnknownAnchor(*id)))
        .collect::<Result<_, _>>()?;
    if anchors_collinear(&points) {
        return Err(SolveError::DegenerateGeometry);
    }
    let problem = Problem::from_request(req)?;
    solve_with(req, &problem, method)
}

/// Residual vector and Jacobian (one row per measurement) at `p`.
pub fn residuals_and_jacobian(
    req: &SolveRequest,
    p: Position,
) -> Result<(DVector<f64>, OMatrix<f64, Dyn, U2>), SolveError> {
    let problem = Problem::from_request(req)?;
    let n = problem.terms.len();
    let mut r = DVector::zeros(n);
    let mut j = OMatrix::<f64, Dyn, U2>::zeros(n);
    for (i, t) in problem.terms.iter().enumerate() {
        r[i] = Problem::residual(t, p);
        let row = Problem::jacobian_row(t, p)?;
        j[(i, 0)] = row[0];
        j[(i, 1)] = row[1];
    }
    Ok((r, j))
}

/// Objective value of the request at `p`.
pub fn cost(req: &SolveRequest, p: Position) -> Result<f64, SolveError> {
    Ok(Problem::from_request(req)?.cost(p))
}

/// Exhaustive search over a lattice with spacing `step` covering the request bounds.
pub fn grid_search(req: &SolveRequest, step: f64) -> Result<(Position, f64), SolveError> {
    let problem = Problem::from_request(req)?;
    let b = req.bounds;
    let nx = (b.width() / step).floor() as usize;
    let ny = (b.height() / step).floor() as usize;
    let mut best = (b.min(), f64::INFINITY);
    for i in 0..=nx {
        let x = b.min_x_m + i as f64 * step;
        for j in 0..=ny {
            let p = Position::new(x, b.min_y_m + j as f64 * step);
            let c = problem.cost(p);
            if c < best.1 {
                best = (p, c);
            }
        }
    }
    Ok(best)
}
