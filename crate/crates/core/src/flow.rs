//! Parameter schedules, the stop index, and the flow of the couplings
//! `(eps_k, m_k, eps^0_k, E_k)` solved as a two-point boundary value problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polymer::{reblock, rescale, Activity};

/// Parameters fixing every per-level quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub l: usize,
    /// `M = L^m`.
    pub m: u32,
    pub n: usize,
    pub e: f64,
    pub mbar: f64,
    pub r: f64,
    pub p: f64,
    pub p0: f64,
    pub eps: f64,
    pub kappa: f64,
    pub kappa0: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { l: 2, m: 2, n: 20, e: 0.01, mbar: 1.0, r: 1.0, p: 2.0, p0: 0.5, eps: 0.01, kappa: 10.0, kappa0: 1.0 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if self.l < 2 {
            return bad("L", "L >= 2 required");
        }
        if !(self.e > 0.0 && self.e < 1.0) {
            return bad("e", "0 < e < 1 required");
        }
        if !(self.r < self.p) {
            return bad("r", "r < p required");
        }
        if !(2.0 * self.p0 < self.p) {
            return bad("p0", "2p0 < p required");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "eps > 0 required");
        }
        if !(self.mbar > 0.0) {
            return bad("mbar", "mbar > 0 required");
        }
        if !(self.kappa >= self.kappa0) {
            return bad("kappa", "kappa >= kappa0 required");
        }
        Ok(())
    }

    pub fn big_m(&self) -> usize {
        self.l.pow(self.m)
    }

    fn lf(&self) -> f64 {
        self.l as f64
    }

    /// `e_k = L^{-(N-k)/2} e`.
    pub fn e_k(&self, k: usize) -> f64 {
        self.lf().powf(-((self.n as f64 - k as f64) / 2.0)) * self.e
    }

    /// `mbar_k = L^{-(N-k)} mbar`.
    pub fn mbar_k(&self, k: usize) -> f64 {
        self.lf().powf(-(self.n as f64 - k as f64)) * self.mbar
    }

    pub fn p_k(&self, k: usize) -> f64 {
        (-self.e_k(k).ln()).powf(self.p)
    }

    pub fn p0_k(&self, k: usize) -> f64 {
        (-self.e_k(k).ln()).powf(self.p0)
    }

    /// `(-log e_k)^r`.
    pub fn r0_k(&self, k: usize) -> f64 {
        (-self.e_k(k).ln()).powf(self.r)
    }

    /// Smallest power of `L` that is at least `(-log e_k)^r`.
    pub fn r_k(&self, k: usize) -> u64 {
        let target = self.r0_k(k);
        let mut v: u64 = 1;
        while (v as f64) < target * (1.0 - 1e-12) {
            v *= self.l as u64;
        }
        v
    }

    /// `log_L r_k`.
    pub fn log_r_k(&self, k: usize) -> i64 {
        let mut v = self.r_k(k);
        let mut n = 0;
        while v > 1 {
            v /= self.l as u64;
            n += 1;
        }
        n
    }

    /// `theta_k = prod_{i<k} (1 - e_i^eps)`.
    pub fn theta_k(&self, k: usize) -> f64 {
        (0..k).map(|i| 1.0 - self.e_k(i).powf(self.eps)).product()
    }

    /// `h_k = (e_k^{-1/4}, e_k^{-1/4 + eps})`.
    pub fn h_k(&self, k: usize) -> (f64, f64) {
        let e = self.e_k(k);
        (e.powf(-0.25), e.powf(-0.25 + self.eps))
    }

    /// `(L^{k-j}, L^{(1+alpha)(k-j)})` on `delta Omega_j`.
    pub fn weights_i(&self, k: usize, j: usize, alpha: f64) -> (f64, f64) {
        let d = k as f64 - j as f64;
        (self.lf().powf(d), self.lf().powf((1.0 + alpha) * d))
    }

    /// `d_k = (N - k) - log_L r_k - m`.
    pub fn d_k(&self, k: usize) -> i64 {
        (self.n as i64 - k as i64) - self.log_r_k(k) - self.m as i64
    }

    /// First `K` with `M r_K = L^{N-K}`.
    pub fn stop_index(&self) -> Result<usize> {
        if self.d_k(0) < 0 {
            return Err(Error::Precondition(format!("N = {} too small: d_0 = {}", self.n, self.d_k(0))));
        }
        (0..=self.n).find(|&k| self.d_k(k) == 0).ok_or_else(|| {
            Error::Precondition(format!("no stop index for N = {}", self.n))
        })
    }

    /// `r_{k+1}/r_k` in `{1, 1/L}` for all `k < N`.
    pub fn r_steps_ok(&self) -> bool {
        (0..self.n).all(|k| {
            let (a, b) = (self.r_k(k), self.r_k(k + 1));
            b == a || b * self.l as u64 == a
        })
    }
}

/// One row of a stop-index sweep.
#[derive(Clone, Debug, Serialize)]
pub struct StopRow {
    pub n: usize,
    pub k: usize,
    pub n_minus_k: usize,
    pub r_k: u64,
    pub e_k: f64,
    pub r_steps_ok: bool,
}

pub fn stop_sweep(base: &Schedule, ns: impl IntoIterator<Item = usize>) -> Result<Vec<StopRow>> {
    ns.into_iter()
        .map(|n| {
            let s = Schedule { n, ..base.clone() };
            let k = s.stop_index()?;
            Ok(StopRow { n, k, n_minus_k: n - k, r_k: s.r_k(k), e_k: s.e_k(k), r_steps_ok: s.r_steps_ok() })
        })
        .collect()
}

/// Smallest `N0` in the sweep with `N - K` constant for all `N >= N0`.
pub fn stabilization_threshold(rows: &[StopRow]) -> Option<usize> {
    let last = rows.last()?.n_minus_k;
    let mut thr = rows.last()?.n;
    for r in rows.iter().rev() {
        if r.n_minus_k != last {
            break;
        }
        thr = r.n;
    }
    Some(thr)
}

/// The maps driving the flow.
pub trait FlowMaps {
    type E: Clone;
    fn zero(&self) -> Self::E;
    /// `eps_k(E_k)`.
    fn eps(&self, k: usize, e: &Self::E) -> f64;
    /// `m_k(E_k)`.
    fn mass(&self, k: usize, e: &Self::E) -> f64;
    /// `L(E'_k + E#_k(m_k, E_k) + E^det_k)`.
    fn next(&self, k: usize, m_k: f64, e: &Self::E) -> Self::E;
    /// `delta eps^0_k`.
    fn delta_eps0(&self, k: usize) -> f64;
    fn norm(&self, e: &Self::E) -> f64;
}

/// Bound flags along a trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BoundFlags {
    /// `|eps_k| <= 2 e_k^{1/4 - 7 eps}`.
    pub eps: bool,
    /// `|m_k| <= e_k^{3/4 - 8 eps}`.
    pub mass: bool,
    /// `||E_k|| <= e_k^{1/4 - 7 eps}`.
    pub activity: bool,
    /// `|eps^0_k| <= e_k^7`.
    pub eps0: bool,
}

impl BoundFlags {
    pub fn all(&self) -> bool {
        self.eps && self.mass && self.activity && self.eps0
    }
}

#[derive(Clone, Debug)]
pub struct FlowState<E> {
    pub k: usize,
    pub e_k: f64,
    pub eps: f64,
    pub m: f64,
    pub eps0: f64,
    pub activity: E,
}

impl<E> FlowState<E> {
    pub fn flags(&self, s: &Schedule, norm: f64) -> BoundFlags {
        let e = self.e_k;
        BoundFlags {
            eps: self.eps.abs() <= 2.0 * e.powf(0.25 - 7.0 * s.eps),
            mass: self.m.abs() <= e.powf(0.75 - 8.0 * s.eps),
            activity: norm <= e.powf(0.25 - 7.0 * s.eps),
            eps0: self.eps0.abs() <= e.powi(7) * (1.0 + 1e-12),
        }
    }
}

/// `e_{k+1} = L^{1/2} e_k`, `eps_{k+1} = L^3 (eps_k + eps(E_k))`,
/// `m_{k+1} = L (m_k + m(E_k))`, `E_{k+1} = next(E_k)`,
/// `eps^0_{k+1} = L^3 (eps^0_k + delta eps^0_k)`.
pub fn flow_step<M: FlowMaps>(s: &Schedule, maps: &M, st: &FlowState<M::E>) -> FlowState<M::E> {
    let l = s.l as f64;
    FlowState {
        k: st.k + 1,
        e_k: l.sqrt() * st.e_k,
        eps: l.powi(3) * (st.eps + maps.eps(st.k, &st.activity)),
        m: l * (st.m + maps.mass(st.k, &st.activity)),
        eps0: l.powi(3) * (st.eps0 + maps.delta_eps0(st.k)),
        activity: maps.next(st.k, st.m, &st.activity),
    }
}

/// Forward iteration from `(eps_0, m_0)` with `E_0 = 0`, `eps^0_0 = 0`.
pub fn forward<M: FlowMaps>(s: &Schedule, maps: &M, k_stop: usize, eps0: f64, m0: f64) -> Vec<FlowState<M::E>> {
    let mut st = FlowState { k: 0, e_k: s.e_k(0), eps: eps0, m: m0, eps0: 0.0, activity: maps.zero() };
    let mut out = Vec::with_capacity(k_stop + 1);
    for _ in 0..k_stop {
        let next = flow_step(s, maps, &st);
        out.push(st);
        st = next;
    }
    out.push(st);
    out
}

/// Trajectory row for tables.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRow {
    pub k: usize,
    pub e_k: f64,
    pub eps: f64,
    pub m: f64,
    pub eps0: f64,
    pub activity_norm: f64,
    pub flags: BoundFlags,
}

#[derive(Clone, Debug, Serialize)]
pub struct BvpSolution {
    pub eps0: f64,
    pub m0: f64,
    pub iterations: usize,
    /// Scaled residual history `|(L^{-3K} eps_K, L^{-K} m_K)|`.
    pub residuals: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
}

impl BvpSolution {
    pub fn flags_ok(&self) -> bool {
        self.trajectory.iter().all(|r| r.flags.all())
    }
}

fn scaled_end<M: FlowMaps>(s: &Schedule, maps: &M, k: usize, x: [f64; 2]) -> [f64; 2] {
    let t = forward(s, maps, k, x[0], x[1]);
    let last = t.last().expect("nonempty trajectory");
    let l = s.l as f64;
    [last.eps * l.powi(-3 * k as i32), last.m * l.powi(-(k as i32))]
}

/// Newton shooting on `(eps_0, m_0)` for `eps_K = m_K = 0`.
pub fn solve_bvp<M: FlowMaps>(s: &Schedule, maps: &M, k_stop: usize, start: [f64; 2], tol: f64, max_iter: usize) -> Result<BvpSolution> {
    let mut x = start;
    let mut residuals = Vec::new();
    let mut f = scaled_end(s, maps, k_stop, x);
    for it in 0..=max_iter {
        let r = f[0].hypot(f[1]);
        residuals.push(r);
        if r <= tol {
            let traj = forward(s, maps, k_stop, x[0], x[1]);
            let trajectory = traj
                .iter()
                .map(|st| {
                    let norm = maps.norm(&st.activity);
                    TrajectoryRow {
                        k: st.k,
                        e_k: st.e_k,
                        eps: st.eps,
                        m: st.m,
                        eps0: st.eps0,
                        activity_norm: norm,
                        flags: st.flags(s, norm),
                    }
                })
                .collect();
            return Ok(BvpSolution { eps0: x[0], m0: x[1], iterations: it, residuals, trajectory });
        }
        if it == max_iter {
            break;
        }
        let mut jac = [[0.0; 2]; 2];
        for c in 0..2 {
            let h = 1e-4 * (1.0 + x[c].abs());
            let (mut xp, mut xm) = (x, x);
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (scaled_end(s, maps, k_stop, xp), scaled_end(s, maps, k_stop, xm));
            for r in 0..2 {
                jac[r][c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Singular { what: "shooting Jacobian".into(), spectrum: vec![det] });
        }
        let dx = [
            (jac[1][1] * f[0] - jac[0][1] * f[1]) / det,
            (-jac[1][0] * f[0] + jac[0][0] * f[1]) / det,
        ];
        x = [x[0] - dx[0], x[1] - dx[1]];
        f = scaled_end(s, maps, k_stop, x);
    }
    Err(Error::NoConvergence { iterations: max_iter, residuals })
}

/// Solves from several starts and returns the solutions with the largest
/// pairwise distance between their `(eps_0, m_0)`.
pub fn multi_start<M: FlowMaps>(s: &Schedule, maps: &M, k_stop: usize, starts: &[[f64; 2]], tol: f64) -> Result<(Vec<BvpSolution>, f64)> {
    let sols: Vec<BvpSolution> = starts.iter().map(|&x| solve_bvp(s, maps, k_stop, x, tol, 50)).collect::<Result<_>>()?;
    let mut spread = 0.0f64;
    for a in &sols {
        for b in &sols {
            spread = spread.max((a.eps0 - b.eps0).abs().max((a.m0 - b.m0).abs()));
        }
    }
    Ok((sols, spread))
}

/// All maps zero.
pub struct ZeroMaps;

impl FlowMaps for ZeroMaps {
    type E = f64;
    fn zero(&self) -> f64 {
        0.0
    }
    fn eps(&self, _: usize, _: &f64) -> f64 {
        0.0
    }
    fn mass(&self, _: usize, _: &f64) -> f64 {
        0.0
    }
    fn next(&self, _: usize, _: f64, _: &f64) -> f64 {
        0.0
    }
    fn delta_eps0(&self, _: usize) -> f64 {
        0.0
    }
    fn norm(&self, e: &f64) -> f64 {
        e.abs()
    }
}

/// Norm surrogate with Lipschitz constant `c`:
/// `eps(E) = c E`, `m(E) = c E`, `next = c (sin E + m_k^2 + e_k^{1/2})`,
/// `delta eps^0_k = c e_k^7`.
pub struct ToyMaps<'a> {
    pub c: f64,
    pub schedule: &'a Schedule,
}

impl FlowMaps for ToyMaps<'_> {
    type E = f64;
    fn zero(&self) -> f64 {
        0.0
    }
    fn eps(&self, _: usize, e: &f64) -> f64 {
        self.c * e
    }
    fn mass(&self, _: usize, e: &f64) -> f64 {
        self.c * e
    }
    fn next(&self, k: usize, m: f64, e: &f64) -> f64 {
        self.c * (e.sin() + m * m + self.schedule.e_k(k).sqrt())
    }
    fn delta_eps0(&self, k: usize) -> f64 {
        self.c * self.schedule.e_k(k).powi(7)
    }
    fn norm(&self, e: &f64) -> f64 {
        e.abs()
    }
}

/// Affine maps independent of `E`; the forward map is affine in
/// `(eps_0, m_0)`.
pub struct AffineMaps {
    pub a: f64,
    pub b: f64,
}

impl FlowMaps for AffineMaps {
    type E = f64;
    fn zero(&self) -> f64 {
        0.0
    }
    fn eps(&self, _: usize, _: &f64) -> f64 {
        self.a
    }
    fn mass(&self, _: usize, _: &f64) -> f64 {
        self.b
    }
    fn next(&self, _: usize, _: f64, _: &f64) -> f64 {
        0.0
    }
    fn delta_eps0(&self, _: usize) -> f64 {
        0.0
    }
    fn norm(&self, e: &f64) -> f64 {
        e.abs()
    }
}

/// Scalar polymer activities on a cube grid that shrinks by `L` each step:
/// `eps(E) = c sum_{X > cube 0} E(X) / |X|`, and
/// `next(E) = rescale(reblock(c E + source_k))` with `source_k` equal to
/// `e_k^{1/2}` on single cubes.
pub struct PolymerMaps<'a> {
    pub c: f64,
    pub schedule: &'a Schedule,
    pub grid: crate::lattice::CubeGrid,
}

impl PolymerMaps<'_> {
    fn grid_at(&self, k: usize) -> crate::lattice::CubeGrid {
        let f = self.schedule.l.pow(k as u32);
        crate::lattice::CubeGrid::new(self.grid.dims.map(|n| (n / f).max(1)), self.grid.side)
            .expect("valid grid")
    }
}

impl FlowMaps for PolymerMaps<'_> {
    type E = Activity<f64>;
    fn zero(&self) -> Activity<f64> {
        Activity::new(self.grid)
    }
    fn eps(&self, _: usize, e: &Activity<f64>) -> f64 {
        self.c * e.iter().filter(|(x, _)| x.contains(&0)).map(|(x, v)| v / x.len() as f64).sum::<f64>()
    }
    fn mass(&self, _: usize, _: &Activity<f64>) -> f64 {
        0.0
    }
    fn next(&self, k: usize, _: f64, e: &Activity<f64>) -> Activity<f64> {
        let g = self.grid_at(k);
        let mut src = Activity::new(g);
        for c in 0..g.len() {
            let v = self.c * e.get(&[c]).copied().unwrap_or(0.0) + self.schedule.e_k(k).sqrt() * self.c;
            src.insert(vec![c], v).expect("single cube");
        }
        for (x, v) in e.iter().filter(|(x, _)| x.len() > 1) {
            src.insert(x.clone(), self.c * v).expect("connected");
        }
        let l = self.schedule.l;
        if g.dims.iter().any(|&n| n % l != 0) {
            return src;
        }
        rescale(&reblock(&src, l).expect("divisible"), l, 1.0).expect("valid grid")
    }
    fn delta_eps0(&self, _: usize) -> f64 {
        0.0
    }
    fn norm(&self, e: &Activity<f64>) -> f64 {
        e.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }
}
