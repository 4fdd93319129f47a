//! Communication and sensing performance functionals.
//!
//! Most quantities come in two flavours: a complex reference built with
//! `num_complex` arithmetic, and a widened route that only multiplies real
//! block matrices (the form the training graph differentiates). The two must
//! agree to round-off; the acceptance suite checks this on random instances.

use std::f64::consts::LN_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{csolve, widen, CMatrix, LinalgError, RMatrix};
use crate::scenario::{Channels, MaPlacement, SystemConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("interference-plus-noise matrix of user {user} is not positive definite")]
    NonPdInterference { user: usize },
    #[error("sensing covariance is singular")]
    SingularCovariance,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Communication precoders `W_k` (`N_t × N_k`) and the sensing beam `v` (`N_t × 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingSet {
    pub w: Vec<CMatrix>,
    pub v: CMatrix,
}

impl BeamformingSet {
    /// `Tr(Σ_k W_k W_kᴴ)`.
    pub fn comm_power(&self) -> f64 {
        self.w.iter().map(|w| w.norm().powi(2)).sum()
    }

    fn check(&self, n_tx: usize) -> Result<(), MetricsError> {
        if self.w.iter().any(|w| w.rows() != n_tx) || self.v.shape() != (n_tx, 1) {
            return Err(MetricsError::Shape(format!("beamformers must have {n_tx} rows")));
        }
        Ok(())
    }

    /// `Σ_k W_k W_kᴴ`, optionally skipping one user, optionally adding `v vᴴ`.
    pub fn covariance(&self, skip: Option<usize>, with_sensing: bool) -> CMatrix {
        let n = self.v.rows();
        let mut acc = CMatrix::zeros(n, n);
        for (u, w) in self.w.iter().enumerate() {
            if Some(u) != skip {
                acc = acc.add(&w.cmul(&w.adjoint()).expect("square")).expect("same shape");
            }
        }
        if with_sensing {
            acc = acc.add(&self.v.cmul(&self.v.adjoint()).expect("outer")).expect("same shape");
        }
        acc
    }
}

/// Dense complex matrix used by the reference path.
struct ZMat {
    n: usize,
    m: usize,
    a: Vec<Complex64>,
}

impl ZMat {
    fn from(c: &CMatrix) -> Self {
        let (n, m) = c.shape();
        let a = (0..n * m).map(|i| Complex64::new(c.re()[(i / m, i % m)], c.im()[(i / m, i % m)])).collect();
        Self { n, m, a }
    }

    fn mul(&self, rhs: &ZMat) -> ZMat {
        assert_eq!(self.m, rhs.n);
        let mut a = vec![Complex64::new(0.0, 0.0); self.n * rhs.m];
        for i in 0..self.n {
            for k in 0..self.m {
                let x = self.a[i * self.m + k];
                for j in 0..rhs.m {
                    a[i * rhs.m + j] += x * rhs.a[k * rhs.m + j];
                }
            }
        }
        ZMat { n: self.n, m: rhs.m, a }
    }

    fn adjoint(&self) -> ZMat {
        let a = (0..self.n * self.m).map(|i| self.a[(i % self.n) * self.m + i / self.n].conj()).collect();
        ZMat { n: self.m, m: self.n, a }
    }

    fn add_diag(mut self, s: f64) -> ZMat {
        for i in 0..self.n.min(self.m) {
            self.a[i * self.m + i] += s;
        }
        self
    }

    /// `ln det` via complex Cholesky; `None` if not positive definite.
    fn logdet_hpd(&self) -> Option<f64> {
        let n = self.n;
        let mut l = vec![Complex64::new(0.0, 0.0); n * n];
        let mut acc = 0.0;
        for j in 0..n {
            let mut d = self.a[j * n + j].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > 0.0) {
                return None;
            }
            let d = d.sqrt();
            acc += 2.0 * d.ln();
            l[j * n + j] = Complex64::new(d, 0.0);
            for i in j + 1..n {
                let mut s = self.a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / d;
            }
        }
        Some(acc)
    }
}

/// Effective channel times covariance times its adjoint: `H F S Fᴴ Hᴴ`.
fn z_quadratic(h: &ZMat, f: &ZMat, s: &ZMat) -> ZMat {
    let hf = h.mul(f);
    hf.mul(s).mul(&hf.adjoint())
}

/// Achievable rate of user `k` in bits/s/Hz from complex log-determinants:
/// `log2|σ²I + H F (Σ_u W_u W_uᴴ + v vᴴ) Fᴴ Hᴴ| − log2|σ²I + H F (Σ_{u≠k} … + v vᴴ) Fᴴ Hᴴ|`.
pub fn user_rate(k: usize, h_k: &CMatrix, f: &CMatrix, beams: &BeamformingSet, noise: f64) -> Result<f64, MetricsError> {
    beams.check(h_k.cols())?;
    let (h, fz) = (ZMat::from(h_k), ZMat::from(f));
    let total = z_quadratic(&h, &fz, &ZMat::from(&beams.covariance(None, true))).add_diag(noise);
    let interf = z_quadratic(&h, &fz, &ZMat::from(&beams.covariance(Some(k), true))).add_diag(noise);
    let li = interf.logdet_hpd().ok_or(MetricsError::NonPdInterference { user: k })?;
    let lt = total.logdet_hpd().ok_or(MetricsError::NonPdInterference { user: k })?;
    Ok(((lt - li) / LN_2).max(0.0))
}

/// `[P; Q] = Ĥ F̂ Ŝ F̂ᵀ [re(H)ᵀ; -im(H)ᵀ]`, the stacked real and imaginary
/// parts of `H F S Fᴴ Hᴴ` computed with real products only.
fn stacked_quadratic(h_k: &CMatrix, f: &CMatrix, s_hat: &RMatrix) -> Result<(RMatrix, RMatrix), LinalgError> {
    let hf = widen(h_k).matmul(&widen(f))?.into_real();
    let right = widen(f).transpose().into_real().matmul(&h_k.re().transpose().vstack(&h_k.im().transpose().scale(-1.0))?)?;
    let pq = hf.matmul(s_hat)?.matmul(&right)?;
    let n = h_k.rows();
    Ok((pq.block(0, 0, n, n), pq.block(n, 0, n, n)))
}

/// `[[σ²I + P, Qᵀ], [Q, σ²I + P]]`.
fn noise_block(p: &RMatrix, q: &RMatrix, noise: f64) -> RMatrix {
    let n = p.rows();
    let diag = p.add(&RMatrix::identity(n).scale(noise)).expect("square");
    let mut out = RMatrix::zeros(2 * n, 2 * n);
    out.set_block(0, 0, &diag);
    out.set_block(0, n, &q.transpose());
    out.set_block(n, 0, q);
    out.set_block(n, n, &diag);
    out
}

/// The same rate through the widened `P/Q` block determinants.
pub fn user_rate_widened(
    k: usize,
    h_k: &CMatrix,
    f: &CMatrix,
    beams: &BeamformingSet,
    noise: f64,
) -> Result<f64, MetricsError> {
    beams.check(h_k.cols())?;
    let widened_cov = |skip: Option<usize>| -> Result<RMatrix, LinalgError> {
        let n = 2 * beams.v.rows();
        let mut s = RMatrix::zeros(n, n);
        for (u, w) in beams.w.iter().enumerate() {
            if Some(u) != skip {
                let wh = widen(w);
                s = s.add(&wh.matmul(&wh.transpose())?.into_real())?;
            }
        }
        let vh = widen(&beams.v);
        s.add(&vh.matmul(&vh.transpose())?.into_real())
    };
    let (p1, q1) = stacked_quadratic(h_k, f, &widened_cov(None)?)?;
    let (p2, q2) = stacked_quadratic(h_k, f, &widened_cov(Some(k))?)?;
    let nonpd = |e: LinalgError| match e {
        LinalgError::NotPositiveDefinite { .. } => MetricsError::NonPdInterference { user: k },
        other => other.into(),
    };
    let l1 = noise_block(&p1, &q1, noise).logdet_spd().map_err(nonpd)?;
    let l2 = noise_block(&p2, &q2, noise).logdet_spd().map_err(nonpd)?;
    Ok((0.5 * (l1 - l2) / LN_2).max(0.0))
}

/// `B = G F (Σ_k W_k W_kᴴ) Fᴴ Gᴴ + σ_z² I`.
pub fn sensing_covariance(g: &CMatrix, f: &CMatrix, beams: &BeamformingSet, noise: f64) -> Result<CMatrix, MetricsError> {
    beams.check(g.cols())?;
    let gf = g.cmul(f)?;
    let b = gf.cmul(&beams.covariance(None, false))?.cmul(&gf.adjoint())?;
    Ok(b.add(&CMatrix::identity(g.rows()).scale(noise))?)
}

/// `B` built from `[re B; im B] = Ĝ F̂ (Σ Ŵ_k Ŵ_kᵀ) F̂ᵀ [re(G)ᵀ; -im(G)ᵀ] + σ_z² [I; 0]`.
pub fn sensing_covariance_widened(
    g: &CMatrix,
    f: &CMatrix,
    beams: &BeamformingSet,
    noise: f64,
) -> Result<CMatrix, MetricsError> {
    beams.check(g.cols())?;
    let n = 2 * beams.v.rows();
    let mut s = RMatrix::zeros(n, n);
    for w in &beams.w {
        let wh = widen(w);
        s = s.add(&wh.matmul(&wh.transpose())?.into_real())?;
    }
    let (re, im) = stacked_quadratic(g, f, &s)?;
    let re = re.add(&RMatrix::identity(g.rows()).scale(noise))?;
    Ok(CMatrix::new(re, im)?)
}

/// `d = B⁻¹ f_r / ‖B⁻¹ f_r‖`.
pub fn optimal_combiner(b: &CMatrix, f_r: &CMatrix) -> Result<CMatrix, MetricsError> {
    let x = csolve(b, f_r).map_err(|e| match e {
        LinalgError::Singular { .. } => MetricsError::SingularCovariance,
        other => other.into(),
    })?;
    let norm = x.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(MetricsError::SingularCovariance);
    }
    Ok(x.scale(1.0 / norm))
}

fn scalar(c: &CMatrix) -> (f64, f64) {
    c.get(0, 0)
}

/// `P_s = |dᴴ G F v|²`.
pub fn sensing_power(d: &CMatrix, g: &CMatrix, f: &CMatrix, v: &CMatrix) -> Result<f64, MetricsError> {
    let (a, b) = scalar(&d.adjoint().cmul(g)?.cmul(f)?.cmul(v)?);
    Ok(a * a + b * b)
}

/// `γ_s = P_s / (dᴴ B d)`.
pub fn sensing_sinr(d: &CMatrix, g: &CMatrix, f: &CMatrix, v: &CMatrix, b: &CMatrix) -> Result<f64, MetricsError> {
    let ps = sensing_power(d, g, f, v)?;
    let denom = scalar(&d.adjoint().cmul(b)?.cmul(d)?).0;
    if !(denom > 0.0) {
        return Err(MetricsError::SingularCovariance);
    }
    Ok(ps / denom)
}

/// `γ_s = a / b` with `[a; 0] = d̂ᵀ Ĝ F̂ v̂ v̂ᵀ F̂ᵀ Ĝᵀ [re d; im d]` and
/// `[b; 0] = d̂ᵀ B̂ [re d; im d]`.
pub fn sensing_sinr_widened(d: &CMatrix, g: &CMatrix, f: &CMatrix, v: &CMatrix, b: &CMatrix) -> Result<f64, MetricsError> {
    let d_hat_t = widen(d).transpose().into_real();
    let d_stack = d.stacked();
    let gfv = widen(g).matmul(&widen(f))?.matmul(&widen(v))?.into_real();
    let a = d_hat_t.matmul(&gfv)?.matmul(&gfv.transpose())?.matmul(&d_stack)?[(0, 0)];
    let bb = d_hat_t.matmul(widen(b).as_real())?.matmul(&d_stack)?[(0, 0)];
    if !(bb > 0.0) {
        return Err(MetricsError::SingularCovariance);
    }
    Ok(a / bb)
}

/// Maximum of the SINR quotient over unit combiners:
/// `|f_tᴴ F v|² · f_rᴴ B⁻¹ f_r`.
pub fn sensing_sinr_max(f_t: &CMatrix, f: &CMatrix, v: &CMatrix, f_r: &CMatrix, b: &CMatrix) -> Result<f64, MetricsError> {
    let (a, c) = scalar(&f_t.adjoint().cmul(f)?.cmul(v)?);
    let q = scalar(&f_r.adjoint().cmul(&csolve(b, f_r)?)?).0;
    Ok((a * a + c * c) * q)
}

/// Smallest distance between any two antennas of one user; `+∞` with fewer
/// than two antennas.
pub fn min_pairwise_distance(local: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, p) in local.iter().enumerate() {
        for q in &local[i + 1..] {
            best = best.min((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    best
}

/// Training objective split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sum_rate: f64,
    pub spacing_penalty: f64,
    pub sinr_penalty: f64,
}

/// `f = -Σ R_k + Σ ν_d (d_min - d_k)⁺ + ν_s (γ₀ - γ_s)⁺`.
pub fn training_loss(rates: &[f64], spacings: &[f64], gamma_s: f64, config: &SystemConfig) -> LossBreakdown {
    let hinge = |x: f64| x.max(0.0);
    let sum_rate: f64 = rates.iter().sum();
    let spacing_penalty: f64 = spacings.iter().map(|d| config.nu_spacing * hinge(config.d_min - d)).sum();
    let sinr_penalty = config.nu_sinr * hinge(config.gamma0 - gamma_s);
    LossBreakdown { total: -sum_rate + spacing_penalty + sinr_penalty, sum_rate, spacing_penalty, sinr_penalty }
}

/// Every reported metric for one decision in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rates: Vec<f64>,
    pub sum_rate: f64,
    pub gamma_s: f64,
    pub p_s: f64,
    pub spacings: Vec<f64>,
    pub power_ok: bool,
    pub beam_norm_ok: bool,
    pub combiner_norm_ok: bool,
    pub sinr_ok: bool,
    pub spacing_ok: bool,
}

/// Scores a decision with the closed-form combiner and the complex reference rates.
pub fn evaluate_decision(
    channels: &Channels,
    ma: &MaPlacement,
    beams: &BeamformingSet,
    config: &SystemConfig,
) -> Result<MetricsRecord, MetricsError> {
    let rates = channels
        .h
        .iter()
        .enumerate()
        .map(|(k, h)| user_rate(k, h, &channels.f, beams, config.noise_comm))
        .collect::<Result<Vec<_>, _>>()?;
    let b = sensing_covariance(&channels.g, &channels.f, beams, config.noise_sens)?;
    let d = optimal_combiner(&b, &channels.f_r)?;
    let gamma_s = sensing_sinr(&d, &channels.g, &channels.f, &beams.v, &b)?;
    let p_s = sensing_power(&d, &channels.g, &channels.f, &beams.v)?;
    let spacings: Vec<f64> = ma.local.iter().map(|u| min_pairwise_distance(u)).collect();
    Ok(MetricsRecord {
        sum_rate: rates.iter().sum(),
        rates,
        gamma_s,
        p_s,
        power_ok: beams.comm_power() <= config.p_max + 1e-9,
        beam_norm_ok: (beams.v.norm() - 1.0).abs() <= 1e-9,
        combiner_norm_ok: (d.norm() - 1.0).abs() <= 1e-9,
        sinr_ok: gamma_s >= config.gamma0,
        spacing_ok: spacings.iter().all(|&s| s >= config.d_min),
        spacings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{sample_scenario, PaPlacement};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_c(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> CMatrix {
        CMatrix::from_fn(m, n, |_, _| (scale * rng.gen_range(-1.0..1.0), scale * rng.gen_range(-1.0..1.0)))
    }

    fn random_beams(rng: &mut ChaCha8Rng, cfg: &SystemConfig) -> BeamformingSet {
        let w: Vec<CMatrix> = (0..cfg.users).map(|_| random_c(rng, cfg.n_tx, cfg.n_ma, 1.0)).collect();
        let p: f64 = w.iter().map(|w| w.norm().powi(2)).sum();
        let w = w.into_iter().map(|w| w.scale((cfg.p_max / p).sqrt())).collect();
        let v = random_c(rng, cfg.n_tx, 1, 1.0);
        let v = v.scale(1.0 / v.norm());
        BeamformingSet { w, v }
    }

    fn random_instance(seed: u64, cfg: &SystemConfig) -> (Channels, BeamformingSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_scenario(cfg, seed);
        let pa = PaPlacement { y: (0..cfg.n_tx).map(|_| rng.gen_range(0.0..cfg.waveguide_length)).collect() };
        let ma = MaPlacement {
            local: (0..cfg.users)
                .map(|_| (0..cfg.n_ma).map(|_| [rng.gen_range(0.0..cfg.ma_region), rng.gen_range(0.0..cfg.ma_region)]).collect())
                .collect(),
        };
        let ch = Channels::synthesize(&pa, &ma, &s, cfg).unwrap();
        (ch, random_beams(&mut rng, cfg))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn zero_precoder_gives_zero_rate() {
        let cfg = SystemConfig::full();
        let (ch, mut beams) = random_instance(1, &cfg);
        beams.w[0] = CMatrix::zeros(cfg.n_tx, cfg.n_ma);
        assert_eq!(user_rate(0, &ch.h[0], &ch.f, &beams, cfg.noise_comm).unwrap(), 0.0);
        assert!(user_rate_widened(0, &ch.h[0], &ch.f, &beams, cfg.noise_comm).unwrap().abs() < 1e-9);
    }

    #[test]
    fn scalar_rate_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_c(&mut rng, 1, 3, 1e-3);
        let f = CMatrix::from_fn(3, 3, |i, j| if i == j { let p: f64 = 0.3 * i as f64 + 0.1; (p.cos(), p.sin()) } else { (0.0, 0.0) });
        let w = random_c(&mut rng, 3, 1, 0.5);
        let beams = BeamformingSet { w: vec![w.clone()], v: CMatrix::zeros(3, 1) };
        let sigma2 = 1e-8;
        let gain = h.cmul(&f).unwrap().cmul(&w).unwrap().norm().powi(2);
        let expect = (1.0 + gain / sigma2).log2();
        assert!(rel(user_rate(0, &h, &f, &beams, sigma2).unwrap(), expect) < 1e-12);
        assert!(rel(user_rate_widened(0, &h, &f, &beams, sigma2).unwrap(), expect) < 1e-10);
    }

    #[test]
    fn rate_paths_agree() {
        let cfg = SystemConfig::full();
        for seed in 0..100 {
            let (ch, beams) = random_instance(seed, &cfg);
            for k in 0..cfg.users {
                let a = user_rate(k, &ch.h[k], &ch.f, &beams, cfg.noise_comm).unwrap();
                let b = user_rate_widened(k, &ch.h[k], &ch.f, &beams, cfg.noise_comm).unwrap();
                assert!(rel(a, b) <= 1e-9, "seed {seed} user {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rate_monotone_in_noise() {
        let cfg = SystemConfig::desk();
        for seed in 0..20 {
            let (ch, beams) = random_instance(seed, &cfg);
            let mut prev = f64::INFINITY;
            for noise in [1e-14, 1e-12, 1e-10, 1e-8] {
                let r = user_rate(0, &ch.h[0], &ch.f, &beams, noise).unwrap();
                assert!(r <= prev + 1e-12);
                prev = r;
            }
        }
    }

    #[test]
    fn covariance_without_precoders_is_noise() {
        let cfg = SystemConfig::full();
        let (ch, mut beams) = random_instance(2, &cfg);
        for w in &mut beams.w {
            *w = CMatrix::zeros(cfg.n_tx, cfg.n_ma);
        }
        let b = sensing_covariance(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
        assert!(b.max_abs_diff(&CMatrix::identity(cfg.n_rx).scale(cfg.noise_sens)) == 0.0);
    }

    #[test]
    fn covariance_paths_agree_and_are_rank_one() {
        let cfg = SystemConfig::full();
        for seed in 0..50 {
            let (ch, beams) = random_instance(seed, &cfg);
            let b = sensing_covariance(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
            let bw = sensing_covariance_widened(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
            assert!(b.max_abs_diff(&bw) <= 1e-10 * b.max_abs());
            assert!(b.hermitian_deviation() <= 1e-12 * b.max_abs());
            // B - σ²I = c f_r f_rᴴ with c = Σ_k ‖W_kᴴ Fᴴ f_t‖².
            let excess = b.sub(&CMatrix::identity(cfg.n_rx).scale(cfg.noise_sens)).unwrap();
            let fhft = ch.f.adjoint().cmul(&ch.f_t).unwrap();
            let c: f64 = beams.w.iter().map(|w| w.adjoint().cmul(&fhft).unwrap().norm().powi(2)).sum();
            let rank_one = ch.f_r.cmul(&ch.f_r.adjoint()).unwrap().scale(c);
            assert!(excess.max_abs_diff(&rank_one) <= 1e-12 * rank_one.max_abs());
        }
    }

    #[test]
    fn matched_filter_when_covariance_is_scaled_identity() {
        let cfg = SystemConfig::full();
        let (ch, _) = random_instance(4, &cfg);
        let b = CMatrix::identity(cfg.n_rx).scale(cfg.noise_sens);
        let d = optimal_combiner(&b, &ch.f_r).unwrap();
        assert!(d.max_abs_diff(&ch.f_r.scale(1.0 / ch.f_r.norm())) < 1e-12);
    }

    #[test]
    fn combiner_beats_random_unit_vectors() {
        let cfg = SystemConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..3 {
            let (ch, beams) = random_instance(seed, &cfg);
            let b = sensing_covariance(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
            let d = optimal_combiner(&b, &ch.f_r).unwrap();
            let best = sensing_sinr(&d, &ch.g, &ch.f, &beams.v, &b).unwrap();
            for _ in 0..10_000 {
                let r = random_c(&mut rng, cfg.n_rx, 1, 1.0);
                let r = r.scale(1.0 / r.norm());
                assert!(sensing_sinr(&r, &ch.g, &ch.f, &beams.v, &b).unwrap() <= best * (1.0 + 1e-12));
            }
            let closed = sensing_sinr_max(&ch.f_t, &ch.f, &beams.v, &ch.f_r, &b).unwrap();
            assert!(rel(best, closed) <= 1e-9);
            let rotated = d.scale_complex((0.3f64.cos(), 0.3f64.sin()));
            assert!(rel(sensing_sinr(&rotated, &ch.g, &ch.f, &beams.v, &b).unwrap(), best) < 1e-12);
            assert!(rel(sensing_sinr_widened(&d, &ch.g, &ch.f, &beams.v, &b).unwrap(), best) < 1e-9);
        }
    }

    #[test]
    fn combiner_is_scale_invariant() {
        let cfg = SystemConfig::desk();
        let (ch, beams) = random_instance(6, &cfg);
        let b = sensing_covariance(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
        let d1 = optimal_combiner(&b, &ch.f_r).unwrap();
        let d2 = optimal_combiner(&b.scale(7.5), &ch.f_r).unwrap();
        assert!(d1.max_abs_diff(&d2) < 1e-12);
        let g1 = sensing_sinr(&d1, &ch.g, &ch.f, &beams.v, &b).unwrap();
        let g2 = sensing_sinr(&d2, &ch.g, &ch.f, &beams.v, &b.scale(7.5)).unwrap();
        assert!(rel(g1, 7.5 * g2) < 1e-12);
    }

    #[test]
    fn orthogonal_beam_kills_sensing_power() {
        let cfg = SystemConfig::desk();
        let (ch, mut beams) = random_instance(9, &cfg);
        // uᴴ v = 0 for u = Fᴴ f_t and v = (conj(u1), -conj(u0), 0, ...).
        let u = ch.f.adjoint().cmul(&ch.f_t).unwrap();
        let (a, b) = (u.get(0, 0), u.get(1, 0));
        let mut v = CMatrix::zeros(cfg.n_tx, 1);
        v.set(0, 0, (b.0, -b.1));
        v.set(1, 0, (-a.0, a.1));
        beams.v = v.scale(1.0 / v.norm());
        let bmat = sensing_covariance(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
        let d = optimal_combiner(&bmat, &ch.f_r).unwrap();
        let scale = ch.g.norm().powi(2);
        assert!(sensing_power(&d, &ch.g, &ch.f, &beams.v).unwrap() <= 1e-24 * scale);
        assert!(sensing_sinr(&d, &ch.g, &ch.f, &beams.v, &bmat).unwrap() <= 1e-12);
    }

    #[test]
    fn phase_of_beam_does_not_matter() {
        let cfg = SystemConfig::desk();
        let (ch, beams) = random_instance(10, &cfg);
        let b = sensing_covariance(&ch.g, &ch.f, &beams, cfg.noise_sens).unwrap();
        let d = optimal_combiner(&b, &ch.f_r).unwrap();
        let v2 = beams.v.scale_complex((2.0f64.cos(), 2.0f64.sin()));
        assert!(rel(sensing_power(&d, &ch.g, &ch.f, &beams.v).unwrap(), sensing_power(&d, &ch.g, &ch.f, &v2).unwrap()) < 1e-12);
        assert!(rel(sensing_sinr(&d, &ch.g, &ch.f, &beams.v, &b).unwrap(), sensing_sinr(&d, &ch.g, &ch.f, &v2, &b).unwrap()) < 1e-12);
    }

    #[test]
    fn pairwise_distance_cases() {
        assert!((min_pairwise_distance(&[[0.0, 0.0], [0.0, 0.03]]) - 0.03).abs() < 1e-15);
        assert_eq!(min_pairwise_distance(&[[0.1, 0.1]]), f64::INFINITY);
        assert!((min_pairwise_distance(&[[0.0, 0.0], [0.0, 0.05], [0.0, 0.12]]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn loss_terms() {
        let cfg = SystemConfig::full();
        let ok = training_loss(&[3.0, 4.0], &[0.05, 0.04], 0.5, &cfg);
        assert_eq!(ok.total, -7.0);
        assert_eq!(ok.spacing_penalty + ok.sinr_penalty, 0.0);

        let tight = training_loss(&[1.0, 1.0], &[cfg.d_min - 0.01, cfg.d_min - 0.01], 1.0, &cfg);
        assert!((tight.spacing_penalty - 2.0).abs() < 1e-12);

        let single = training_loss(&[1.0], &[f64::INFINITY], cfg.gamma0, &cfg);
        assert_eq!(single.sinr_penalty, 0.0);
        assert_eq!(single.spacing_penalty, 0.0);

        let low = training_loss(&[2.0], &[0.1], 0.0, &cfg);
        assert!((low.sinr_penalty - 10.0).abs() < 1e-12);
        assert_eq!(low.total, -low.sum_rate + low.spacing_penalty + low.sinr_penalty);
    }

    #[test]
    fn evaluate_decision_flags() {
        let cfg = SystemConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_scenario(&cfg, 3);
        let pa = PaPlacement::uniform(&cfg);
        let ma = MaPlacement::fixed_ula(&cfg);
        let ch = Channels::synthesize(&pa, &ma, &s, &cfg).unwrap();
        let beams = random_beams(&mut rng, &cfg);
        let rec = evaluate_decision(&ch, &ma, &beams, &cfg).unwrap();
        assert!(rec.power_ok && rec.beam_norm_ok && rec.combiner_norm_ok && rec.spacing_ok);
        assert!(rec.rates.iter().all(|r| *r >= 0.0) && rec.gamma_s >= 0.0 && rec.p_s >= 0.0);
        assert!((rec.sum_rate - rec.rates.iter().sum::<f64>()).abs() < 1e-15);
    }
}
