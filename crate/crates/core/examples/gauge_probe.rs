//! Scratch probe: how sharply does the optimization landscape discriminate
//! the true wiretap channel from gauge-rotated copies, and how large is the
//! convergence basin around the truth?

use semtap_core::channel::{transmit, ChannelConfig};
use semtap_core::image::synth_face;
use semtap_core::inversion::{
    covariance_channel_init, run_burst, OptimHyper, OptimState, UpdateMode,
};
use semtap_core::metrics::{eval_embedding, evaluate};
use semtap_core::numerics::{sample_complex_gaussian, C64, CMat, Rng};
use semtap_core::semcom::{EncoderHandle, PowerNorm};

fn procrustes_dist(g_hat: &CMat, g: &CMat) -> f64 {
    // min over unitary U of ||g_hat*U - g||_F / ||g||_F
    let n = g.cols();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        // (g_hat^H g)[i,j]
        let mut acc = C64::new(0.0, 0.0);
        for r in 0..g.rows() {
            acc += g_hat[(r, i)].conj() * g[(r, j)];
        }
        acc
    });
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let rot = u * vt; // U* = U V^H
    let mut num = 0.0;
    for r in 0..g.rows() {
        for c in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..n {
                acc += g_hat[(r, k)] * rot[(k, c)];
            }
            num += (acc - g[(r, c)]).norm_sqr();
        }
    }
    (num.sqrt()) / g.frob_norm()
}

fn main() {
    let emb = eval_embedding();
    let enc = EncoderHandle::linear(16, 16, 2, 32, 7, PowerNorm::Global).unwrap();
    let hyper = OptimHyper::default();
    let snr_db = 20.0;

    println!("=== E1: converged loss/cosine at true G vs gauge-rotated copies (ImageOnly, 1500 steps) ===");
    for seed in 0..3u64 {
        let mut rng = Rng::from_seed(1000 + seed);
        let x = synth_face(&mut rng, 16, 16);
        let cfg = ChannelConfig::new(2, 2, 2, snr_db).unwrap();
        let cw = enc.encode(&x).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        let g = trans.wiretap_channel().clone();

        let mut variants: Vec<(String, CMat)> = vec![("true".into(), g.clone())];
        for k in 0..3 {
            // random unitary via QR-ish: use procrustes of random matrix
            let mut r2 = Rng::from_seed(7000 + 10 * seed + k);
            let z = sample_complex_gaussian(&mut r2, 2, 2, 1.0).unwrap();
            let m = nalgebra::DMatrix::from_fn(2, 2, |i, j| z[(i, j)]);
            let svd = m.svd(true, true);
            let q = svd.u.as_ref().unwrap() * svd.v_t.as_ref().unwrap();
            let mut ga = CMat::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = C64::new(0.0, 0.0);
                    for t in 0..2 {
                        acc += g[(i, t)] * q[(t, j)];
                    }
                    ga[(i, j)] = acc;
                }
            }
            variants.push((format!("unitary{k}"), ga));
        }
        for (name, g0) in variants {
            let mut st_rng = Rng::from_seed(31 + seed);
            let x0: Vec<f64> = (0..768).map(|_| 0.5 + 0.05 * st_rng.normal()).collect();
            let mut st = OptimState::new(x0, g0, hyper).unwrap();
            let mut last = f64::NAN;
            for _ in 0..3 {
                let b = run_burst(&mut st, UpdateMode::ImageOnly, 500, &obs, &enc).unwrap();
                if let Some(t) = b.trace.last() {
                    last = t.total;
                }
                if b.aborted {
                    break;
                }
            }
            let img = st.snapshot_image(&enc).unwrap();
            let m = evaluate(&x, &img, &emb).unwrap();
            println!(
                "seed {seed} {name:>9}: total {last:10.4}  cosine {:7.3}  psnr {:6.2}",
                m.cosine, m.psnr
            );
        }
    }

    println!();
    println!("=== E2: basin radius — Joint 4000 steps from G*(1-d) + d*R ===");
    for seed in 0..3u64 {
        let mut rng = Rng::from_seed(2000 + seed);
        let x = synth_face(&mut rng, 16, 16);
        let cfg = ChannelConfig::new(2, 2, 2, snr_db).unwrap();
        let cw = enc.encode(&x).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        let g = trans.wiretap_channel().clone();
        for (di, delta) in [0.0, 0.1, 0.2, 0.3, 0.5, 1.0].iter().enumerate() {
            let mut r2 = Rng::from_seed(9000 + 10 * seed + di as u64);
            let z = sample_complex_gaussian(&mut r2, 2, 2, 1.0).unwrap();
            let scale = g.frob_norm() / z.frob_norm();
            let g0 = g.scale(C64::new(1.0 - delta, 0.0)).add(&z.scale(C64::new(delta * scale, 0.0)));
            let d_before = procrustes_dist(&g0, &g);
            let mut st_rng = Rng::from_seed(77 + seed);
            let x0: Vec<f64> = (0..768).map(|_| 0.5 + 0.05 * st_rng.normal()).collect();
            let mut st = OptimState::new(x0, g0, hyper).unwrap();
            for _ in 0..8 {
                let b = run_burst(&mut st, UpdateMode::Joint, 500, &obs, &enc).unwrap();
                if b.aborted {
                    break;
                }
            }
            let d_after = procrustes_dist(&st.g, &g);
            let img = st.snapshot_image(&enc).unwrap();
            let m = evaluate(&x, &img, &emb).unwrap();
            println!(
                "seed {seed} delta {delta:4.2}: d(G)  {d_before:6.3} -> {d_after:6.3}   cosine {:7.3}  psnr {:6.2}",
                m.cosine, m.psnr
            );
        }
    }

    println!();
    println!("=== E3: covariance-init procrustes error at T=32 (20 seeds) ===");
    let mut errs = Vec::new();
    for seed in 0..20u64 {
        let mut rng = Rng::from_seed(3000 + seed);
        let x = synth_face(&mut rng, 16, 16);
        let cfg = ChannelConfig::new(2, 2, 2, snr_db).unwrap();
        let cw = enc.encode(&x).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        let g0 = covariance_channel_init(&obs).unwrap();
        errs.push(procrustes_dist(&g0, trans.wiretap_channel()));
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "min {:.3} median {:.3} max {:.3}",
        errs[0],
        errs[errs.len() / 2],
        errs[errs.len() - 1]
    );

    println!();
    println!("=== E4: mean-codeword least-squares channel estimate, raw error (20 seeds) ===");
    // Eve-side prior mean codeword: average the encoder output over sampled
    // synthetic faces (attacker's own rng — no source image crosses over).
    let mut prior_rng = Rng::from_seed(0xA77AC);
    let t_slots = 32usize;
    let mut mean_slots: Vec<Vec<C64>> = vec![vec![C64::new(0.0, 0.0); 2]; t_slots];
    let n_prior = 64;
    for _ in 0..n_prior {
        let xp = synth_face(&mut prior_rng, 16, 16);
        let cwp = enc.encode(&xp).unwrap();
        let slots = semtap_core::semcom::reshape_codeword(cwp.symbols(), 2, t_slots).unwrap();
        for (t, s) in slots.iter().enumerate() {
            for i in 0..2 {
                mean_slots[t][i] += s.as_slice()[i] / C64::new(n_prior as f64, 0.0);
            }
        }
    }
    let mut raw_errs = Vec::new();
    let mut ls_estimates = Vec::new();
    for seed in 0..20u64 {
        let mut rng = Rng::from_seed(3000 + seed);
        let x = synth_face(&mut rng, 16, 16);
        let cfg = ChannelConfig::new(2, 2, 2, snr_db).unwrap();
        let cw = enc.encode(&x).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        // LS: G_hat = (sum_t r_t m_t^H)(sum_t m_t m_t^H)^{-1}
        let mut rm = CMat::zeros(2, 2);
        let mut mm = CMat::zeros(2, 2);
        for (t, r) in obs.received.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    rm[(i, j)] += r.as_slice()[i] * mean_slots[t][j].conj();
                    mm[(i, j)] += mean_slots[t][i] * mean_slots[t][j].conj();
                }
            }
        }
        let mm_na = nalgebra::DMatrix::from_fn(2, 2, |i, j| mm[(i, j)]);
        let inv = mm_na.try_inverse().unwrap();
        let mut g_hat = CMat::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..2 {
                    acc += rm[(i, k)] * inv[(k, j)];
                }
                g_hat[(i, j)] = acc;
            }
        }
        let g = trans.wiretap_channel();
        let raw = g_hat.sub(g).frob_norm() / g.frob_norm();
        raw_errs.push(raw);
        ls_estimates.push((seed, g_hat, x, obs, g.clone()));
    }
    let mut sorted = raw_errs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "raw error: min {:.3} median {:.3} max {:.3}",
        sorted[0],
        sorted[sorted.len() / 2],
        sorted[sorted.len() - 1]
    );

    println!();
    println!("=== E5: Joint 4000 steps from the mean-LS estimate (20 seeds) ===");
    let mut n_succ = 0;
    for (seed, g_hat, x, obs, _g) in &ls_estimates {
        let mut st_rng = Rng::from_seed(555 + seed);
        let x0: Vec<f64> = (0..768).map(|_| 0.5 + 0.05 * st_rng.normal()).collect();
        let mut st = OptimState::new(x0, g_hat.clone(), hyper).unwrap();
        for _ in 0..8 {
            let b = run_burst(&mut st, UpdateMode::Joint, 500, obs, &enc).unwrap();
            if b.aborted {
                break;
            }
        }
        let img = st.snapshot_image(&enc).unwrap();
        let m = evaluate(x, &img, &emb).unwrap();
        if m.success {
            n_succ += 1;
        }
        println!(
            "seed {seed}: raw_err {:.3}  cosine {:7.3}  psnr {:6.2}  success {}",
            raw_errs[*seed as usize], m.cosine, m.psnr, m.success
        );
    }
    println!("success rate: {n_succ}/20");
}
