//! Lindblad master-equation propagation with constant or cosine-modulated rates.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fock::{DensityMatrix, OperatorMatrix};
use crate::linalg::{c, Csr, C64, I};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Constant,
    Cosine,
}

/// Rate multiplying the dissipator: gamma + gamma_prime·cos(omega0·t) for the cosine shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateSchedule {
    pub gamma: f64,
    pub gamma_prime: f64,
    pub omega0: f64,
    pub shape: Shape,
}

impl RateSchedule {
    pub fn constant(gamma: f64) -> Self {
        RateSchedule { gamma, gamma_prime: 0.0, omega0: 0.0, shape: Shape::Constant }
    }

    pub fn cosine(gamma: f64, gamma_prime: f64, omega0: f64) -> Self {
        RateSchedule { gamma, gamma_prime, omega0, shape: Shape::Cosine }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.gamma_prime >= 0.0) {
            return Err(Error::Domain(format!("negative rate in schedule {self:?}")));
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        match self.shape {
            Shape::Constant => self.gamma,
            Shape::Cosine => self.gamma + self.gamma_prime * (self.omega0 * t).cos(),
        }
    }
}

/// Jump operators sharing one rate schedule.
#[derive(Clone, Debug)]
pub struct JumpOperatorSet {
    pub ops: Vec<OperatorMatrix>,
}

impl JumpOperatorSet {
    pub fn new(ops: Vec<OperatorMatrix>) -> Self {
        JumpOperatorSet { ops }
    }

    pub fn empty() -> Self {
        JumpOperatorSet { ops: Vec::new() }
    }
}

/// dρ/dt = −i[H,ρ] + rate·Σ_j (L_j ρ L_j† − ½{L_j†L_j, ρ}). No Hermiticity is assumed.
pub fn liouvillian_apply(rho: &DMatrix<C64>, h: &OperatorMatrix, jumps: &JumpOperatorSet, rate: f64) -> Result<DMatrix<C64>> {
    let n = rho.nrows();
    if rho.ncols() != n || h.dim != n || jumps.ops.iter().any(|l| l.dim != n) {
        return Err(Error::Dimension(format!("ρ is {}x{}, H is {}", n, rho.ncols(), h.dim)));
    }
    if !(rate >= 0.0) {
        return Err(Error::Domain(format!("negative rate {rate}")));
    }
    let hr = h.mul_dense(rho);
    let rh = h.adjoint().mul_dense(&rho.adjoint()).adjoint();
    let mut out = (hr - rh) * (-I);
    for l in &jumps.ops {
        let lr = l.mul_dense(rho);
        let lrl = l.mul_dense(&lr.adjoint()).adjoint();
        let ld = l.adjoint();
        let k = ld.to_dense() * l.to_dense();
        out += (lrl - (&k * rho + rho * &k) * c(0.5)) * c(rate);
    }
    Ok(out)
}

/// Precomputed generator for Hermitian ρ. With G = H − (i r/2)K, K = Σ L†L,
/// and X = ρG†, the flow is dρ = i(X − X†) + r·Σ LρL†.
struct FastGenerator {
    n: usize,
    h: Csr<C64>,
    k: Csr<C64>,
    jumps: JumpForm,
}

enum JumpForm {
    None,
    /// all jumps diagonal: Σ LρL† = M∘ρ
    Diagonal(Vec<f64>),
    General(Vec<Csr<C64>>),
}

impl FastGenerator {
    fn new(h: &OperatorMatrix, jumps: &JumpOperatorSet) -> Result<Self> {
        let n = h.dim;
        if jumps.ops.iter().any(|l| l.dim != n) {
            return Err(Error::Dimension("jump operator dimension differs from H".into()));
        }
        let hc = h.to_csr();
        let ls: Vec<Csr<C64>> = jumps.ops.iter().map(|l| l.to_csr()).collect();
        let mut k = Csr::zeros(n, n);
        for l in &ls {
            let lk = l.adjoint().matmul(l);
            k = add_csr(&k, &lk);
        }
        let jf = if ls.is_empty() {
            JumpForm::None
        } else if ls.iter().all(|l| l.is_diagonal()) {
            let mut m = vec![0.0; n * n];
            let diags: Vec<Vec<C64>> = ls.iter().map(|l| l.diagonal()).collect();
            let all_real = diags.iter().all(|d| d.iter().all(|z| z.im == 0.0));
            if all_real {
                for d in &diags {
                    for b in 0..n {
                        for a in 0..n {
                            m[b * n + a] += d[a].re * d[b].re;
                        }
                    }
                }
                JumpForm::Diagonal(m)
            } else {
                JumpForm::General(ls)
            }
        } else {
            JumpForm::General(ls)
        };
        Ok(FastGenerator { n, h: hc, k, jumps: jf })
    }

    /// out = L(ρ) for Hermitian ρ; `x` and `tmp` are scratch buffers (column-major n×n).
    fn apply(&self, rho: &[C64], rate: f64, out: &mut [C64], x: &mut [C64], tmp: &mut [C64]) {
        let n = self.n;
        // X = ρ G†, column j of X = Σ_k ρ[:,k] conj(G[j,k])
        x.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        let half = 0.5 * rate;
        for j in 0..n {
            let xj = &mut x[j * n..(j + 1) * n];
            for p in self.h.indptr[j]..self.h.indptr[j + 1] {
                let kk = self.h.indices[p];
                let g = self.h.data[p].conj();
                let rk = &rho[kk * n..(kk + 1) * n];
                for (xv, rv) in xj.iter_mut().zip(rk) {
                    *xv += g * rv;
                }
            }
            if half != 0.0 {
                for p in self.k.indptr[j]..self.k.indptr[j + 1] {
                    let kk = self.k.indices[p];
                    // conj(−i r/2 K[j,k]) = i r/2 conj(K[j,k])
                    let g = I * self.k.data[p].conj() * half;
                    let rk = &rho[kk * n..(kk + 1) * n];
                    for (xv, rv) in xj.iter_mut().zip(rk) {
                        *xv += g * rv;
                    }
                }
            }
        }
        // out = i(X − X†)
        for b in 0..n {
            for a in 0..n {
                let v = x[b * n + a] - x[a * n + b].conj();
                out[b * n + a] = C64::new(-v.im, v.re);
            }
        }
        if rate == 0.0 {
            return;
        }
        match &self.jumps {
            JumpForm::None => {}
            JumpForm::Diagonal(m) => {
                for (o, (r, mv)) in out.iter_mut().zip(rho.iter().zip(m)) {
                    *o += r * (rate * mv);
                }
            }
            JumpForm::General(ls) => {
                for l in ls {
                    // A = ρ L†, then L A = (A† L†)†
                    right_mul_adjoint(rho, l, n, x);
                    adjoint_into(x, n, tmp);
                    right_mul_adjoint(tmp, l, n, x);
                    for b in 0..n {
                        for a in 0..n {
                            out[b * n + a] += x[a * n + b].conj() * rate;
                        }
                    }
                }
            }
        }
    }
}

fn add_csr(a: &Csr<C64>, b: &Csr<C64>) -> Csr<C64> {
    let mut trip = Vec::with_capacity(a.nnz() + b.nnz());
    for r in 0..a.n_rows {
        trip.extend(a.row(r).map(|(col, v)| (r, col, v)));
        trip.extend(b.row(r).map(|(col, v)| (r, col, v)));
    }
    Csr::from_triplets(a.n_rows, a.n_cols, trip)
}

/// out = M L† for column-major M.
fn right_mul_adjoint(m: &[C64], l: &Csr<C64>, n: usize, out: &mut [C64]) {
    out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
    for j in 0..n {
        let oj = &mut out[j * n..(j + 1) * n];
        for (kk, v) in l.row(j) {
            let g = v.conj();
            let mk = &m[kk * n..(kk + 1) * n];
            for (o, x) in oj.iter_mut().zip(mk) {
                *o += g * x;
            }
        }
    }
}

fn adjoint_into(m: &[C64], n: usize, out: &mut [C64]) {
    for b in 0..n {
        for a in 0..n {
            out[a * n + b] = m[b * n + a].conj();
        }
    }
}

/// Named series sampled on a time grid.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub final_state: Option<DensityMatrix>,
    pub max_trace_drift: f64,
    pub max_hermiticity_defect: f64,
    pub min_eigenvalue: f64,
}

impl TrajectoryRecord {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("t");
        for n in &self.names {
            header.push(',');
            header.push_str(n);
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.times.iter().enumerate() {
            let mut line = fmt15(*t);
            for v in &self.values {
                line.push(',');
                line.push_str(&fmt15(v[i]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Decimal text with 15 significant digits.
pub fn fmt15(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x:.14e}")
}

#[derive(Clone, Debug)]
pub struct EvolveOptions {
    /// record every `stride` steps
    pub stride: usize,
    /// number of evenly spaced samples where the minimum eigenvalue is checked
    pub eig_checks: usize,
    pub keep_final: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { stride: 1, eig_checks: 11, keep_final: true }
    }
}

/// Gershgorin bound on the spectral width of H.
pub fn spectral_width_bound(h: &OperatorMatrix) -> f64 {
    let m = h.to_csr();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..m.n_rows {
        let mut d = 0.0;
        let mut off = 0.0;
        for (col, v) in m.row(r) {
            if col == r {
                d = v.re;
            } else {
                off += v.norm();
            }
        }
        lo = lo.min(d - off);
        hi = hi.max(d + off);
    }
    hi - lo
}

/// Real-arithmetic generator for real symmetric H and real diagonal jumps.
/// With ρ = A + iB and d_ab = −½Σ_j (l_j(a) − l_j(b))², R = BH, S = AH:
/// dA = −(R + Rᵀ) + r d∘A, dB = S − Sᵀ + r d∘B.
struct RealGenerator {
    n: usize,
    h: Csr<f64>,
    d: Vec<f64>,
    scratch: Vec<f64>,
    scratch2: Vec<f64>,
}

impl RealGenerator {
    fn try_new(h: &OperatorMatrix, jumps: &JumpOperatorSet) -> Option<Self> {
        let n = h.dim;
        let hc = h.to_csr();
        if !hc.is_real() || !(h.hermitian || h.hermiticity_defect() == 0.0) {
            return None;
        }
        let mut diags = Vec::new();
        for l in &jumps.ops {
            let lc = l.to_csr();
            if l.dim != n || !lc.is_diagonal() || !lc.is_real() {
                return None;
            }
            diags.push(lc.diagonal().into_iter().map(|z| z.re).collect::<Vec<f64>>());
        }
        let mut d = vec![0.0; n * n];
        for dj in &diags {
            for b in 0..n {
                for a in 0..n {
                    d[b * n + a] -= 0.5 * (dj[a] - dj[b]).powi(2);
                }
            }
        }
        Some(RealGenerator { n, h: hc.real_part(), d, scratch: vec![0.0; n * n], scratch2: vec![0.0; n * n] })
    }

    /// oa = A·H and ob = B·H for column-major A, B (H symmetric, so column j uses row j of H).
    fn right_mul2(&self, a: &[f64], b: &[f64], oa: &mut [f64], ob: &mut [f64]) {
        let n = self.n;
        oa.iter_mut().for_each(|v| *v = 0.0);
        ob.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let oaj = &mut oa[j * n..(j + 1) * n];
            let obj = &mut ob[j * n..(j + 1) * n];
            for (kk, v) in self.h.row(j) {
                let ak = &a[kk * n..(kk + 1) * n];
                let bk = &b[kk * n..(kk + 1) * n];
                for i in 0..n {
                    oaj[i] += v * ak[i];
                    obj[i] += v * bk[i];
                }
            }
        }
    }
}

trait Generator {
    type S: Copy + Send + std::ops::Add<Output = Self::S> + std::ops::Mul<f64, Output = Self::S>;
    fn len(&self) -> usize;
    fn apply(&mut self, x: &[Self::S], rate: f64, out: &mut [Self::S]);
    fn load(&self, rho: &DMatrix<C64>) -> Vec<Self::S>;
    fn view(&self, x: &[Self::S], buf: &mut [C64]);
}

impl Generator for RealGenerator {
    type S = f64;
    fn len(&self) -> usize {
        2 * self.n * self.n
    }
    fn apply(&mut self, x: &[f64], rate: f64, out: &mut [f64]) {
        let n = self.n;
        let nn = n * n;
        let (a, b) = x.split_at(nn);
        let (oa, ob) = out.split_at_mut(nn);
        let mut s = std::mem::take(&mut self.scratch);
        let mut r = std::mem::take(&mut self.scratch2);
        // S = AH, R = BH; dA = −(R + Rᵀ), dB = S − Sᵀ
        self.right_mul2(a, b, &mut s, &mut r);
        for j in 0..n {
            for i in 0..n {
                oa[j * n + i] = -(r[j * n + i] + r[i * n + j]);
                ob[j * n + i] = s[j * n + i] - s[i * n + j];
            }
        }
        if rate != 0.0 {
            for ((o, v), d) in oa.iter_mut().zip(a).zip(&self.d) {
                *o += rate * d * v;
            }
            for ((o, v), d) in ob.iter_mut().zip(b).zip(&self.d) {
                *o += rate * d * v;
            }
        }
        self.scratch = s;
        self.scratch2 = r;
    }
    fn load(&self, rho: &DMatrix<C64>) -> Vec<f64> {
        let mut v: Vec<f64> = rho.as_slice().iter().map(|z| z.re).collect();
        v.extend(rho.as_slice().iter().map(|z| z.im));
        v
    }
    fn view(&self, x: &[f64], buf: &mut [C64]) {
        let nn = self.n * self.n;
        for (i, z) in buf.iter_mut().enumerate() {
            *z = C64::new(x[i], x[nn + i]);
        }
    }
}

struct ComplexGenerator {
    gen: FastGenerator,
    x: Vec<C64>,
    tmp: Vec<C64>,
}

impl Generator for ComplexGenerator {
    type S = C64;
    fn len(&self) -> usize {
        self.gen.n * self.gen.n
    }
    fn apply(&mut self, x: &[C64], rate: f64, out: &mut [C64]) {
        self.gen.apply(x, rate, out, &mut self.x, &mut self.tmp);
    }
    fn load(&self, rho: &DMatrix<C64>) -> Vec<C64> {
        rho.as_slice().to_vec()
    }
    fn view(&self, x: &[C64], buf: &mut [C64]) {
        buf.copy_from_slice(x);
    }
}

/// Fixed-step RK4 integration with the rate sampled at the stage times.
pub fn evolve(
    rho0: &DensityMatrix,
    h: &OperatorMatrix,
    jumps: &JumpOperatorSet,
    schedule: &RateSchedule,
    t_end: f64,
    dt: f64,
    observables: &[(String, OperatorMatrix)],
    opts: &EvolveOptions,
) -> Result<TrajectoryRecord> {
    schedule.validate()?;
    let n = rho0.dim();
    if h.dim != n {
        return Err(Error::Dimension(format!("ρ has dimension {n}, H has {}", h.dim)));
    }
    if !(t_end > 0.0) || !(dt > 0.0) {
        return Err(Error::Domain(format!("t_end = {t_end}, dt = {dt}")));
    }
    for (name, w) in observables {
        if w.dim != n {
            return Err(Error::Dimension(format!("observable {name} has dimension {}", w.dim)));
        }
        if !w.hermitian {
            return Err(Error::Contract(format!("observable {name} is not Hermitian")));
        }
    }
    let width = spectral_width_bound(h);
    if dt * width >= 0.1 {
        log::warn!("dt·width = {:.3} exceeds the 0.1 stability heuristic", dt * width);
    }
    if let Some(gen) = RealGenerator::try_new(h, jumps) {
        return integrate(gen, rho0, schedule, t_end, dt, observables, opts);
    }
    let gen = FastGenerator::new(h, jumps)?;
    let nn = n * n;
    let cg = ComplexGenerator { gen, x: vec![C64::new(0.0, 0.0); nn], tmp: vec![C64::new(0.0, 0.0); nn] };
    integrate(cg, rho0, schedule, t_end, dt, observables, opts)
}

fn integrate<G: Generator>(
    mut gen: G,
    rho0: &DensityMatrix,
    schedule: &RateSchedule,
    t_end: f64,
    dt: f64,
    observables: &[(String, OperatorMatrix)],
    opts: &EvolveOptions,
) -> Result<TrajectoryRecord> {
    let n = rho0.dim();
    let obs: Vec<ObsForm> = observables.iter().map(|(_, w)| ObsForm::new(w)).collect();
    let steps = (t_end / dt).round() as usize;
    let stride = opts.stride.max(1);
    let n_samples = steps / stride + 1;
    let eig_every = if opts.eig_checks == 0 { usize::MAX } else { ((n_samples - 1) / opts.eig_checks.max(1)).max(1) };

    let mut state = gen.load(&rho0.rho);
    let len = gen.len();
    let zero = state[0] * 0.0;
    let mut k1 = vec![zero; len];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut stage = k1.clone();
    let mut view = vec![C64::new(0.0, 0.0); n * n];

    let mut rec = TrajectoryRecord {
        times: Vec::with_capacity(n_samples),
        names: observables.iter().map(|(s, _)| s.clone()).collect(),
        values: vec![Vec::with_capacity(n_samples); observables.len()],
        final_state: None,
        max_trace_drift: 0.0,
        max_hermiticity_defect: 0.0,
        min_eigenvalue: f64::INFINITY,
    };
    let t0 = rho0.time;
    let mut sample_idx = 0usize;
    let record = |rho: &[C64], t: f64, rec: &mut TrajectoryRecord, sample_idx: usize| -> Result<()> {
        let tr: C64 = (0..n).map(|a| rho[a * n + a]).sum();
        let drift = (tr - c(1.0)).norm();
        rec.max_trace_drift = rec.max_trace_drift.max(drift);
        if drift > 1e-6 {
            return Err(Error::Integration { t, msg: format!("trace drift {drift:e}; reduce dt") });
        }
        let mut herm: f64 = 0.0;
        for b in 0..n {
            for a in 0..=b {
                herm = herm.max((rho[b * n + a] - rho[a * n + b].conj()).norm());
            }
        }
        rec.max_hermiticity_defect = rec.max_hermiticity_defect.max(herm);
        if herm > 1e-7 {
            return Err(Error::Integration { t, msg: format!("Hermiticity defect {herm:e}") });
        }
        if sample_idx % eig_every == 0 || sample_idx + 1 == n_samples {
            let dm = DensityMatrix::new(DMatrix::from_column_slice(n, n, rho), t);
            let e = dm.min_eigenvalue();
            rec.min_eigenvalue = rec.min_eigenvalue.min(e);
            if e < -1e-6 {
                return Err(Error::Integration { t, msg: format!("negative eigenvalue {e:e}") });
            }
        }
        rec.times.push(t);
        for (o, series) in obs.iter().zip(rec.values.iter_mut()) {
            series.push(o.expect(rho, n));
        }
        Ok(())
    };
    gen.view(&state, &mut view);
    record(&view, t0, &mut rec, sample_idx)?;
    for step in 0..steps {
        let t = t0 + step as f64 * dt;
        let r1 = schedule.rate(t);
        let r2 = schedule.rate(t + 0.5 * dt);
        let r4 = schedule.rate(t + dt);
        gen.apply(&state, r1, &mut k1);
        for i in 0..len {
            stage[i] = state[i] + k1[i] * (0.5 * dt);
        }
        gen.apply(&stage, r2, &mut k2);
        for i in 0..len {
            stage[i] = state[i] + k2[i] * (0.5 * dt);
        }
        gen.apply(&stage, r2, &mut k3);
        for i in 0..len {
            stage[i] = state[i] + k3[i] * dt;
        }
        gen.apply(&stage, r4, &mut k4);
        let w = dt / 6.0;
        for i in 0..len {
            state[i] = state[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * w;
        }
        if (step + 1) % stride == 0 {
            sample_idx += 1;
            gen.view(&state, &mut view);
            record(&view, t0 + (step + 1) as f64 * dt, &mut rec, sample_idx)?;
        }
    }
    if opts.keep_final {
        gen.view(&state, &mut view);
        rec.final_state = Some(DensityMatrix::new(DMatrix::from_column_slice(n, n, &view), t0 + steps as f64 * dt));
    }
    Ok(rec)
}

enum ObsForm {
    Diagonal(Vec<f64>),
    General(Csr<C64>),
}

impl ObsForm {
    fn new(w: &OperatorMatrix) -> Self {
        let m = w.to_csr();
        if m.is_diagonal() && m.is_real() {
            let mut d = vec![0.0; w.dim];
            for (i, v) in m.diagonal().into_iter().enumerate() {
                d[i] = v.re;
            }
            ObsForm::Diagonal(d)
        } else {
            ObsForm::General(m)
        }
    }

    fn expect(&self, rho: &[C64], n: usize) -> f64 {
        match self {
            ObsForm::Diagonal(d) => d.iter().enumerate().map(|(a, w)| w * rho[a * n + a].re).sum(),
            ObsForm::General(m) => {
                // tr(ρW) = Σ_ab ρ_ba W_ab
                let mut acc = C64::new(0.0, 0.0);
                for a in 0..n {
                    for (b, v) in m.row(a) {
                        acc += rho[a * n + b] * v;
                    }
                }
                acc.re
            }
        }
    }
}

/// tr(ρW) for Hermitian W; errors when W is not Hermitian or the result has an
/// imaginary part above 1e-9.
pub fn expectation(rho: &DensityMatrix, w: &OperatorMatrix) -> Result<f64> {
    if !w.hermitian {
        return Err(Error::Contract("expectation requires a Hermitian observable".into()));
    }
    if w.dim != rho.dim() {
        return Err(Error::Dimension(format!("ρ is {}, W is {}", rho.dim(), w.dim)));
    }
    let z = (&rho.rho * w.to_dense()).trace();
    if z.im.abs() > 1e-9 {
        return Err(Error::Contract(format!("expectation has imaginary part {:e}", z.im)));
    }
    Ok(z.re)
}

pub const ORACLE_MAX_DIM: usize = 64;

/// Exact ρ(t) from the dense exponential of the vectorised Liouvillian (test oracle).
pub fn liouvillian_exponential_oracle(rho0: &DensityMatrix, h: &OperatorMatrix, jumps: &JumpOperatorSet, rate: f64, t: f64) -> Result<DensityMatrix> {
    let n = rho0.dim();
    if n > ORACLE_MAX_DIM {
        return Err(Error::Refused(format!("superoperator oracle limited to dimension {ORACLE_MAX_DIM}, got {n}")));
    }
    let s = superoperator(h, jumps, rate, n);
    let prop = (s * c(t)).exp();
    let v = DMatrix::from_column_slice(n * n, 1, rho0.rho.as_slice());
    let out = prop * v;
    Ok(DensityMatrix::new(DMatrix::from_column_slice(n, n, out.as_slice()), rho0.time + t))
}

/// Column-stacking superoperator: vec(AXB) = (Bᵀ ⊗ A) vec(X).
fn superoperator(h: &OperatorMatrix, jumps: &JumpOperatorSet, rate: f64, n: usize) -> DMatrix<C64> {
    let id = DMatrix::<C64>::identity(n, n);
    let hd = h.to_dense();
    let mut s = (id.kronecker(&hd) - hd.transpose().kronecker(&id)) * (-I);
    for l in &jumps.ops {
        let ld = l.to_dense();
        let k = ld.adjoint() * &ld;
        s += (ld.map(|z| z.conj()).kronecker(&ld) - id.kronecker(&k) * c(0.5) - k.transpose().kronecker(&id) * c(0.5)) * c(rate);
    }
    s
}
