//! The penalty objective as one differentiable graph over a batch.
//!
//! Channels are rebuilt inside the graph from the predicted positions so the
//! loss is differentiable with respect to them. Complex values are carried as
//! separate real and imaginary tensors. Log-determinants use the widened real
//! form `ln|M| = ½ ln|M̂|`, and the sensing term uses the closed-form SINR
//! maximum `|f_tᴴ F v|² · f_rᴴ B⁻¹ f_r` evaluated with a widened solve.

use std::f64::consts::{LN_2, PI};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::network::NetworkOutput;
use crate::scenario::{target_steering, Scenario, SystemConfig};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Per-sample loss terms, each of shape `[B]`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub sum_rate: Var,
    pub spacing_penalty: Var,
    pub sinr_penalty: Var,
    /// Sensing SINR at the optimal combiner.
    pub gamma: Var,
}

fn constant(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> Var {
    g.constant(Tensor::new(shape.to_vec(), data).expect("constant shape"))
}

/// `√(dx² + dy² + dz²)` with broadcasting.
fn distance(g: &mut Graph, dx: Var, dy: Var, dz: Var) -> Result<Var> {
    let (x2, y2, z2) = (g.square(dx), g.square(dy), g.square(dz));
    let s = g.add(x2, y2)?;
    let s = g.add(s, z2)?;
    Ok(g.sqrt(s))
}

/// `c · e^{-jθ}` as (re, im).
fn phasor(g: &mut Graph, c: Var, theta: Var) -> Result<(Var, Var)> {
    let (cos, sin) = (g.cos(theta), g.sin(theta));
    let re = g.mul(c, cos)?;
    let im = g.mul(c, sin)?;
    Ok((re, g.neg(im)))
}

/// `(a + jb)(c + jd)`.
fn cmul(g: &mut Graph, (a, b): (Var, Var), (c, d): (Var, Var)) -> Result<(Var, Var)> {
    let (ac, bd, ad, bc) = (g.mul(a, c)?, g.mul(b, d)?, g.mul(a, d)?, g.mul(b, c)?);
    Ok((g.sub(ac, bd)?, g.add(ad, bc)?))
}

/// Complex matrix product on (re, im) pairs via batched real matmuls.
fn cmatmul(g: &mut Graph, (a, b): (Var, Var), (c, d): (Var, Var)) -> Result<(Var, Var)> {
    let (ac, bd, ad, bc) = (g.matmul(a, c)?, g.matmul(b, d)?, g.matmul(a, d)?, g.matmul(b, c)?);
    Ok((g.sub(ac, bd)?, g.add(ad, bc)?))
}

/// Builds the loss terms for `out`, the network output on `batch`.
pub fn loss_terms(
    g: &mut Graph,
    out: &NetworkOutput,
    batch: &[&Scenario],
    sys: &SystemConfig,
) -> Result<LossTerms> {
    let bsz = batch.len();
    let (k, nk, nt, l, nr) = (sys.users, sys.n_ma, sys.n_tx, sys.scatterers, sys.n_rx);
    let m = k * nk + 1;
    let wavenumber = 2.0 * PI / sys.wavelength;
    let amp = sys.wavelength / (4.0 * PI);

    // Geometry constants.
    let xs: Vec<f64> = (0..nt).map(|n| sys.waveguide_x(n)).collect();
    let origin = |axis: usize| -> Vec<f64> { batch.iter().flat_map(|s| s.user_origins.iter().map(move |o| o[axis])).collect() };
    let scat = |axis: usize| -> Vec<f64> { batch.iter().flat_map(|s| s.scatterers.iter().map(move |p| p[axis])).collect() };

    // PA and MA coordinates: frame [B, K, N_k, N_t].
    let x_n = constant(g, &[1, 1, 1, nt], xs.clone());
    let y_n = g.reshape(out.y_t, &[bsz, 1, 1, nt])?;
    let ma = g.reshape(out.ma, &[bsz, k, nk, 2])?;
    let mx = g.slice(ma, 3, 0, 1)?;
    let my = g.slice(ma, 3, 1, 2)?;
    let bx = constant(g, &[bsz, k, 1, 1], origin(0));
    let by = constant(g, &[bsz, k, 1, 1], origin(1));
    let uz = constant(g, &[bsz, k, 1, 1], origin(2));
    let ux = g.add(mx, bx)?;
    let uy = g.add(my, by)?;

    // Line of sight.
    let dx = g.sub(ux, x_n)?;
    let dy = g.sub(uy, y_n)?;
    let d_los = distance(g, dx, dy, uz)?;
    let inv = g.recip(d_los);
    let c_los = g.scale(inv, amp);
    let th = g.scale(d_los, wavenumber);
    let (los_re, los_im) = phasor(g, c_los, th)?;

    // Single-bounce scattering: frame [B, K, N_k, L, N_t].
    let (nlos_re, nlos_im) = if l > 0 {
        let sx = constant(g, &[bsz, 1, 1, l, 1], scat(0));
        let sy = constant(g, &[bsz, 1, 1, l, 1], scat(1));
        let sz = constant(g, &[bsz, 1, 1, l, 1], scat(2));
        let x5 = constant(g, &[1, 1, 1, 1, nt], xs.clone());
        let y5 = g.reshape(out.y_t, &[bsz, 1, 1, 1, nt])?;
        let ddx = g.sub(x5, sx)?;
        let ddy = g.sub(y5, sy)?;
        let dt = distance(g, ddx, ddy, sz)?;
        let ux5 = g.reshape(ux, &[bsz, k, nk, 1, 1])?;
        let uy5 = g.reshape(uy, &[bsz, k, nk, 1, 1])?;
        let uz5 = g.reshape(uz, &[bsz, k, 1, 1, 1])?;
        let ex = g.sub(ux5, sx)?;
        let ey = g.sub(uy5, sy)?;
        let ez = g.sub(uz5, sz)?;
        let du = distance(g, ex, ey, ez)?;
        let prod = g.mul(dt, du)?;
        let inv = g.recip(prod);
        let c = g.scale(inv, amp);
        let diff = g.sub(du, dt)?;
        let th = g.scale(diff, wavenumber);
        let (re, im) = phasor(g, c, th)?;
        let re = g.sum_axis(re, 3)?;
        let im = g.sum_axis(im, 3)?;
        (g.reshape(re, &[bsz, k, nk, nt])?, g.reshape(im, &[bsz, k, nk, nt])?)
    } else {
        let z = g.constant(Tensor::zeros(&[bsz, k, nk, nt]));
        (z, z)
    };
    let w_los = (sys.rician_k / (sys.rician_k + 1.0)).sqrt();
    let w_nlos = (1.0 / (sys.rician_k + 1.0)).sqrt();
    let a = g.scale(los_re, w_los);
    let b = g.scale(nlos_re, w_nlos);
    let h_re = g.add(a, b)?;
    let a = g.scale(los_im, w_los);
    let b = g.scale(nlos_im, w_nlos);
    let h_im = g.add(a, b)?;

    // Waveguide phases F_n = e^{-j 2π n_e y_n / λ}, shape [B, 1, 1, N_t].
    let th = g.scale(y_n, wavenumber * sys.refractive_index);
    let one = g.constant(Tensor::scalar(1.0));
    let (f_re, f_im) = phasor(g, one, th)?;
    // Effective channel H F, scaled by 1/σ_c so the noise term is the identity.
    let (hf_re, hf_im) = cmul(g, (h_re, h_im), (f_re, f_im))?;
    let inv_sigma = 1.0 / sys.noise_comm.sqrt();
    let hf_re = g.scale(hf_re, inv_sigma);
    let hf_im = g.scale(hf_im, inv_sigma);
    let hf_re = g.reshape(hf_re, &[bsz, k * nk, nt])?;
    let hf_im = g.reshape(hf_im, &[bsz, k * nk, nt])?;

    // Transmit matrix Z = [W_1 … W_K v], shape [B, N_t, K·N_k + 1].
    let w = g.reshape(out.w, &[bsz, 2, k, nt, nk])?;
    let v = g.reshape(out.v, &[bsz, 2, nt, 1])?;
    let mut z = Vec::with_capacity(2);
    for part in 0..2 {
        let mut cols = Vec::with_capacity(k + 1);
        for u in 0..k {
            let s = g.slice(w, 1, part, part + 1)?;
            let s = g.slice(s, 2, u, u + 1)?;
            cols.push(g.reshape(s, &[bsz, nt, nk])?);
        }
        let s = g.slice(v, 1, part, part + 1)?;
        cols.push(g.reshape(s, &[bsz, nt, 1])?);
        z.push(g.concat(&cols, 2)?);
    }
    let (z_re, z_im) = (z[0], z[1]);

    // Rates from ln|I + A Aᴴ| with A = (H_k F Z)/σ_c, all columns versus
    // interference columns only.
    let (a_re, a_im) = cmatmul(g, (hf_re, hf_im), (z_re, z_im))?;
    let a_re = g.reshape(a_re, &[bsz, k, nk, m])?;
    let a_im = g.reshape(a_im, &[bsz, k, nk, m])?;
    let mut mask = vec![1.0; k * m];
    for u in 0..k {
        for c in u * nk..(u + 1) * nk {
            mask[u * m + c] = 0.0;
        }
    }
    let mask = constant(g, &[1, k, 1, m], mask);
    let eye = g.constant(Tensor::eye(2 * nk));
    let mut logdets = Vec::with_capacity(2);
    for masked in [false, true] {
        let (re, im) = if masked { (g.mul(a_re, mask)?, g.mul(a_im, mask)?) } else { (a_re, a_im) };
        let neg_im = g.neg(im);
        let top = g.concat(&[re, neg_im], 3)?;
        let bottom = g.concat(&[im, re], 3)?;
        let wide = g.concat(&[top, bottom], 2)?;
        let wide = g.reshape(wide, &[bsz * k, 2 * nk, 2 * m])?;
        let wt = g.transpose(wide)?;
        let gram = g.matmul(wide, wt)?;
        let s = g.add(gram, eye)?;
        logdets.push(g.logdet_spd(s)?);
    }
    let diff = g.sub(logdets[0], logdets[1])?;
    let rates = g.scale(diff, 0.5 / LN_2);
    let rates = g.reshape(rates, &[bsz, k])?;
    let sum_rate = g.sum_axis(rates, 1)?;
    let sum_rate = g.reshape(sum_rate, &[bsz])?;

    // Antenna spacing hinge ν_d (d_min − min pairwise distance)⁺ per user.
    let spacing_penalty = if nk > 1 {
        let mut pairs = Vec::new();
        for i in 0..nk {
            for j in i + 1..nk {
                let mut row = vec![0.0; nk];
                row[i] = 1.0;
                row[j] = -1.0;
                pairs.extend(row);
            }
        }
        let np = nk * (nk - 1) / 2;
        let dmat = constant(g, &[np, nk], pairs);
        let mut sq = Vec::with_capacity(2);
        for coord in [mx, my] {
            let c = g.reshape(coord, &[bsz * k, nk, 1])?;
            let d = g.matmul(dmat, c)?;
            sq.push(g.square(d));
        }
        let d2 = g.add(sq[0], sq[1])?;
        let dmin2 = g.min_axis(d2, 1)?;
        let dmin = g.sqrt(dmin2);
        let neg = g.neg(dmin);
        let gap = g.add_scalar(neg, sys.d_min);
        let hinge = g.relu(gap);
        let hinge = g.reshape(hinge, &[bsz, k])?;
        let per = g.sum_axis(hinge, 1)?;
        let per = g.reshape(per, &[bsz])?;
        g.scale(per, sys.nu_spacing)
    } else {
        g.constant(Tensor::zeros(&[bsz]))
    };

    // Sensing. f_t from the PA positions to the target, shape [B, 1, N_t].
    let q = |axis: usize| -> Vec<f64> { batch.iter().map(|s| s.target[axis]).collect() };
    let qx = constant(g, &[bsz, 1, 1], q(0));
    let qy = constant(g, &[bsz, 1, 1], q(1));
    let qz = constant(g, &[bsz, 1, 1], q(2));
    let x3 = constant(g, &[1, 1, nt], xs);
    let y3 = g.reshape(out.y_t, &[bsz, 1, nt])?;
    let tdx = g.sub(x3, qx)?;
    let tdy = g.sub(y3, qy)?;
    let dt = distance(g, tdx, tdy, qz)?;
    let inv = g.recip(dt);
    let c = g.scale(inv, amp);
    let th = g.scale(dt, wavenumber);
    let (ft_re, ft_im) = phasor(g, c, th)?;
    // conj(f_t) ⊙ F, then times Z: row vector [B, 1, M] holding f_tᴴ F W_u and f_tᴴ F v.
    let f_re3 = g.reshape(f_re, &[bsz, 1, nt])?;
    let f_im3 = g.reshape(f_im, &[bsz, 1, nt])?;
    let ft_conj_im = g.neg(ft_im);
    let row = cmul(g, (ft_re, ft_conj_im), (f_re3, f_im3))?;
    let (e_re, e_im) = cmatmul(g, row, (z_re, z_im))?;
    let e2a = g.square(e_re);
    let e2b = g.square(e_im);
    let e2 = g.add(e2a, e2b)?;
    let comm = g.slice(e2, 2, 0, m - 1)?;
    let beta = g.sum_axis(comm, 2)?; // [B, 1, 1]
    let signal = g.slice(e2, 2, m - 1, m)?;

    // B/σ_z² = (β/σ_z²) f̂ f̂ᵀ + I in widened form; solve against [re f_r; im f_r].
    let mut phi = Vec::with_capacity(bsz * 4 * nr * nr);
    let mut stack = Vec::with_capacity(bsz * 2 * nr);
    let rx = sys.rx_positions();
    for s in batch {
        let fr = target_steering(&rx, &s.target, sys.wavelength).map_err(|e| AutodiffError::Shape(e.to_string()))?;
        let col: Vec<f64> = fr.re().as_slice().iter().chain(fr.im().as_slice()).copied().collect();
        // f̂ = [[re, −im], [im, re]]; f̂ f̂ᵀ = c cᵀ + c' c'ᵀ with c = [re; im], c' = [−im; re].
        let alt: Vec<f64> = fr.im().as_slice().iter().map(|v| -v).chain(fr.re().as_slice().iter().copied()).collect();
        for i in 0..2 * nr {
            for j in 0..2 * nr {
                phi.push(col[i] * col[j] + alt[i] * alt[j]);
            }
        }
        stack.extend(col);
    }
    let phi = constant(g, &[bsz, 2 * nr, 2 * nr], phi);
    let fs = constant(g, &[bsz, 2 * nr, 1], stack);
    let beta = g.scale(beta, 1.0 / sys.noise_sens);
    let bq = g.mul(phi, beta)?;
    let eye = g.constant(Tensor::eye(2 * nr));
    let bmat = g.add(bq, eye)?;
    let x = g.solve(bmat, fs)?;
    let fst = g.transpose(fs)?;
    let quad = g.matmul(fst, x)?; // f_rᴴ B⁻¹ f_r · σ_z²
    let gamma = g.mul(signal, quad)?;
    let gamma = g.scale(gamma, 1.0 / sys.noise_sens);
    let gamma = g.reshape(gamma, &[bsz])?;
    let neg = g.neg(gamma);
    let gap = g.add_scalar(neg, sys.gamma0);
    let hinge = g.relu(gap);
    let sinr_penalty = g.scale(hinge, sys.nu_sinr);

    let neg_rate = g.neg(sum_rate);
    let total = g.add(neg_rate, spacing_penalty)?;
    let total = g.add(total, sinr_penalty)?;
    Ok(LossTerms { total, sum_rate, spacing_penalty, sinr_penalty, gamma })
}
