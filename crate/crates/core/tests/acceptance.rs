//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! The four trained models (GM and unimodal GMEG, flow and normal-prior
//! NFMG) are fitted on worker threads while the quick checks run.

use std::f64::consts::PI;
use std::time::Instant;

use gmixseq::checkpoint::{Checkpoint, Model};
use gmixseq::distributions::{ad, kl_categorical_to_uniform, DiagGaussian, MixtureParams};
use gmixseq::gmeg::{EmotionSpec, EpochLog, GmegConfig, GmegModel, InterpMode};
use gmixseq::metrics::{
    beat_align, cluster_separation, div, div_motion, e_pdv, e_ppl, extract_motion_beats, pcm,
    BeatTrack, BA_SIGMA, PATH_LEN, PCM_TAU,
};
use gmixseq::nfmg::{FlowStack, NfmgConfig, NfmgModel};
use gmixseq::nn::StackConfig;
use gmixseq::params::{Adam, AdamConfig, ParamStore};
use gmixseq::synthdata::{
    gen_emotion_corpus, gen_motion_corpus, Corpus, EmotionConfig, Modality, MotionConfig,
    OracleClassifier, MOTION_DIM,
};
use gmixseq::tensor::grad_check;
use gmixseq::train::TrainConfig;
use gmixseq::util::{l2, normal_vec, seeded, spearman, uniform};
use gmixseq::{Result, Tensor};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { ok, detail })
}

type Verdict = std::result::Result<Outcome, String>;

fn report(n: usize, name: &str, t0: Instant, r: Verdict) -> bool {
    let secs = t0.elapsed().as_secs_f64();
    let (ok, detail) = match r {
        Ok(o) => (o.ok, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n} {name}: {} ({secs:.1}s) {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = seeded(seed);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| lo + (hi - lo) * uniform(&mut r))
            .collect(),
    )
    .unwrap()
}

// ---- 1: gradients ----

fn primitive_grad_errors() -> Result<Vec<(&'static str, f64)>> {
    let x = matrix(3, 4, 1, 0.2, 2.0);
    let w = matrix(4, 3, 2, -1.0, 1.0);
    let row = Tensor::vector(normal_vec(&mut seeded(3), 4));
    let mut out = Vec::new();

    out.push((
        "elementwise",
        grad_check(
            |t, x| {
                let rv = t.param(row.clone())?;
                let a = t.add(x, rv)?;
                let b = t.mul(a, x)?;
                let c = t.exp(b)?;
                let d = t.log(x)?;
                let e = t.tanh(d)?;
                let f = t.relu(a)?;
                let g = t.sub(c, e)?;
                let h = t.neg(f)?;
                let i = t.add(g, h)?;
                let j = t.scale(i, 0.3)?;
                let k = t.add_scalar(j, 1.0)?;
                let m = t.mean_rows(k)?;
                let n = t.norm(m)?;
                let o = t.sum(k)?;
                t.add(n, o)
            },
            &x,
            1e-5,
        )?,
    ));
    out.push((
        "matmul",
        grad_check(
            |t, x| {
                let wv = t.param(w.clone())?;
                let y = t.matmul(x, wv)?;
                let z = t.matmul_nt(y, y)?;
                let s = t.square(z)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )?,
    ));
    let sm = matrix(3, 5, 4, -2.0, 2.0);
    let weights = matrix(3, 5, 5, -1.0, 1.0);
    for causal in [false, true] {
        out.push((
            if causal { "causal_softmax" } else { "softmax" },
            grad_check(
                |t, x| {
                    let s = if causal {
                        t.causal_softmax(x)?
                    } else {
                        t.softmax(x)?
                    };
                    let wv = t.constant(weights.clone())?;
                    let y = t.mul(s, wv)?;
                    t.sum(y)
                },
                &sm,
                1e-5,
            )?,
        ));
    }
    let st = matrix(4, 6, 6, -1.0, 1.0);
    let gain = Tensor::vector(normal_vec(&mut seeded(7), 6));
    let mix = matrix(6, 6, 8, -1.0, 1.0);
    out.push((
        "structural",
        grad_check(
            |t, x| {
                let a = t.slice_cols(x, 1, 3)?;
                let b = t.slice_rows(x, 2, 2)?;
                let c = t.concat_cols(&[a, a])?;
                let d = t.transpose(c)?;
                let e = t.reverse_cols(x)?;
                let f = t.concat_rows(&[e, b])?;
                let gv = t.param(gain.clone())?;
                let bias = t.constant(Tensor::zeros(&[6]))?;
                let g = t.layer_norm(f, gv, bias, 1e-5)?;
                let h = t.logsumexp_rows(g)?;
                let i = t.reshape(d, &[24])?;
                let j = t.square(i)?;
                let mv = t.constant(mix.clone())?;
                let k = t.mul(g, mv)?;
                let s1 = t.sum(h)?;
                let s2 = t.sum(j)?;
                let s3 = t.sum(k)?;
                let s12 = t.add(s1, s2)?;
                t.add(s12, s3)
            },
            &st,
            1e-5,
        )?,
    ));
    // packed [means (3x2) | log_vars (3x2) | z (2)] through every tape distribution op
    let packed = Tensor::vector(
        normal_vec(&mut seeded(9), 14)
            .iter()
            .map(|v| 0.5 * v)
            .collect(),
    );
    out.push((
        "distributions",
        grad_check(
            |t, p| {
                let p = t.reshape(p, &[1, 14])?;
                let means = t.slice_cols(p, 0, 6)?;
                let means = t.reshape(means, &[3, 2])?;
                let lvs = t.slice_cols(p, 6, 6)?;
                let lvs = t.reshape(lvs, &[3, 2])?;
                let z = t.slice_cols(p, 12, 2)?;
                let z = t.reshape(z, &[2])?;
                let comp = ad::component_log_pdfs(t, means, lvs, z)?;
                let lj = t.add_scalar(comp, -(3f64).ln())?;
                let mixture = ad::mixture_log_pdf(t, lj)?;
                let lr = ad::log_responsibilities(t, lj)?;
                let klc = ad::kl_categorical_to_uniform(t, lr)?;
                let m0 = t.slice_rows(means, 0, 1)?;
                let m0 = t.reshape(m0, &[2])?;
                let l0 = t.slice_rows(lvs, 0, 1)?;
                let l0 = t.reshape(l0, &[2])?;
                let klg = ad::kl_to_std_normal(t, m0, l0)?;
                let single = ad::gaussian_log_pdf(t, m0, l0, z)?;
                let eps = t.constant(Tensor::vector(vec![0.3, -0.7]))?;
                let s = ad::reparam(t, m0, l0, eps)?;
                let s = t.square(s)?;
                let s = t.sum(s)?;
                let a = t.add(mixture, klc)?;
                let b = t.add(klg, single)?;
                let c = t.add(a, b)?;
                t.add(c, s)
            },
            &packed,
            1e-5,
        )?,
    ));
    Ok(out)
}

fn small_stack() -> StackConfig {
    StackConfig::new(1, 8, 2, 16).unwrap()
}

fn criterion_1() -> Result<Outcome> {
    let prims = primitive_grad_errors()?;
    let worst_prim = prims.iter().map(|p| p.1).fold(0.0, f64::max);

    let mut ecfg = EmotionConfig::new(3, 1, 6, 6, 21);
    ecfg.audio_dim = 4;
    let ec = gen_emotion_corpus(&ecfg)?;
    let mut composite = Vec::new();
    for unimodal in [false, true] {
        let mut c = GmegConfig::new(3, 6, 4, 2);
        c.z_dim = 4;
        c.w_dim = 4;
        c.encoder = small_stack();
        c.mapper = small_stack();
        c.decoder = small_stack();
        c.unimodal = unimodal;
        let m = GmegModel::new(c, 22)?;
        let r = &ec.records[1];
        let mut nr = seeded(23);
        let (nw, nz) = (normal_vec(&mut nr, 4), normal_vec(&mut nr, 4));
        let label = r.label.unwrap();
        composite
            .push(m.grad_check_loss(&r.coefs, &r.audio, label, r.speaker, &nw, &nz, 1e-5, 300)?);
    }
    let mc = gen_motion_corpus(&MotionConfig::new(2, 1, 6, 24, Modality::Bimodal))?;
    for flow in [true, false] {
        let mut c = NfmgConfig::new(mc.audio_dim, 2);
        c.latent_dim = 4;
        c.encoder = small_stack();
        c.decoder = small_stack();
        c.coupling = small_stack();
        c.n_flow_steps = 2;
        c.flow_prior = flow;
        let m = NfmgModel::new(c, 25)?;
        let r = &mc.records[0];
        composite.push(m.grad_check_loss(
            &r.coefs,
            &r.audio,
            r.speaker,
            &normal_vec(&mut seeded(26), 4),
            1e-5,
            300,
        )?);
    }
    let worst_full = composite.iter().copied().fold(0.0, f64::max);
    outcome(
        worst_prim < 1e-6 && worst_full < 1e-4,
        format!(
            "primitive max rel err {worst_prim:.2e} (<1e-6) over {:?}; full losses [gmeg, gmeg-unimodal, nfmg, nfmg-normal] {:?} (<1e-4)",
            prims.iter().map(|p| p.0).collect::<Vec<_>>(),
            composite.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    )
}

// ---- 2: distributions ----

fn criterion_2() -> Result<Outcome> {
    let mut r = seeded(31);
    let mut gauss = |d: usize| {
        DiagGaussian::new(
            (0..d).map(|_| 4.0 * uniform(&mut r) - 2.0).collect(),
            (0..d).map(|_| 2.0 * uniform(&mut r) - 1.0).collect(),
        )
    };
    let comps = vec![gauss(3)?, gauss(3)?, gauss(3)?, gauss(3)?];
    let w = vec![0.1, 0.2, 0.3, 0.4];
    let m = MixtureParams::new(comps.clone(), w.clone())?;
    let z = [0.3, -0.4, 0.8];
    // independent route: linear-space densities from the closed-form formula
    let dens: Vec<f64> = comps
        .iter()
        .zip(&w)
        .map(|(c, w)| {
            let mut p = *w;
            for d in 0..3 {
                let v = c.log_var[d].exp();
                p *= (-(z[d] - c.mean[d]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
            }
            p
        })
        .collect();
    let total: f64 = dens.iter().sum();
    let resp = m.responsibilities(&z)?;
    let resp_err = resp
        .0
        .iter()
        .zip(&dens)
        .map(|(a, d)| (a - d / total).abs())
        .fold(0.0, f64::max);
    let mix_err = ((m.log_pdf(&z)? - total.ln()) / total.ln()).abs();

    let g = DiagGaussian::new(vec![0.5, -0.3, 1.0], vec![0.2, -0.5, 0.4])?;
    let std = DiagGaussian::standard(3);
    let mut nr = seeded(32);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let s = g.reparam_sample(&normal_vec(&mut nr, 3))?;
        acc += g.log_pdf(&s)? - std.log_pdf(&s)?;
    }
    let kl_mc_err = (acc / n as f64 - g.kl_to_std_normal()).abs();

    // 1-d KL by Simpson quadrature of q log(q/p)
    let g1 = DiagGaussian::new(vec![0.7], vec![-0.4])?;
    let s1 = (-0.2f64).exp();
    let (lo, hi, steps) = (0.7 - 12.0 * s1, 0.7 + 12.0 * s1, 40_000);
    let h = (hi - lo) / steps as f64;
    let mut quad = 0.0;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let lq = g1.log_pdf(&[x])?;
        let wgt = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        quad += wgt * lq.exp() * (lq - DiagGaussian::standard(1).log_pdf(&[x])?);
    }
    let kl_quad_err = (quad * h / 3.0 - g1.kl_to_std_normal()).abs();

    let p = [0.1, 0.6, 0.3];
    let direct: f64 = p.iter().map(|q: &f64| q * (q * 3.0).ln()).sum();
    let klc_err = (kl_categorical_to_uniform(&p) - direct).abs();

    outcome(
        resp_err < 1e-12 && mix_err < 1e-12 && klc_err < 1e-12 && kl_quad_err < 1e-9 && kl_mc_err < 1e-2,
        format!(
            "responsibilities {resp_err:.1e}, mixture log-pdf rel {mix_err:.1e}, categorical KL {klc_err:.1e} (<1e-12); \
             gaussian KL quadrature {kl_quad_err:.1e} (<1e-9), Monte Carlo 1e6 {kl_mc_err:.1e} (<1e-2)"
        ),
    )
}

// ---- 3: flow ----

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        acc += a[c][c].abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

fn flow(dim: usize, seed: u64, sharp: f64) -> Result<(ParamStore, FlowStack)> {
    let mut store = ParamStore::new();
    let f = FlowStack::new(&mut store, "f", dim, 4, small_stack(), &mut seeded(seed))?;
    for s in &f.steps {
        for v in store.get_mut(s.head.w).data_mut() {
            *v *= sharp;
        }
    }
    Ok((store, f))
}

fn criterion_3() -> Result<Outcome> {
    let (store, f) = flow(8, 41, 3.0)?;
    let mut rng = seeded(42);
    let mut rt = 0.0f64;
    for _ in 0..1000 {
        let z: Vec<f64> = normal_vec(&mut rng, 8).iter().map(|v| 2.0 * v).collect();
        let (y, a) = f.forward(&store, &z)?;
        let (x, b) = f.inverse(&store, &y)?;
        rt = z
            .iter()
            .zip(&x)
            .map(|(p, q)| (p - q).abs())
            .fold(rt, f64::max)
            .max((a + b).abs());
    }

    let (store4, f4) = flow(4, 43, 3.0)?;
    let mut jac_err = 0.0f64;
    for _ in 0..5 {
        let z = normal_vec(&mut rng, 4);
        let (_, ld) = f4.forward(&store4, &z)?;
        let h = 1e-5;
        let mut jac = vec![vec![0.0; 4]; 4];
        for j in 0..4 {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[j] += h;
            dn[j] -= h;
            let (fu, fd) = (f4.forward(&store4, &up)?.0, f4.forward(&store4, &dn)?.0);
            for i in 0..4 {
                jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        jac_err = jac_err.max((ld - log_abs_det(jac)).abs());
    }

    let (store2, f2) = flow(2, 44, 1.0)?;
    // wide box: contracting steps give this density heavy tails
    let (lo, h) = (-30.0, 0.1);
    let n = (60.0 / h) as usize;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            mass += f2.log_prob(&store2, &p)?.exp();
        }
    }
    mass *= h * h;
    outcome(
        rt < 1e-10 && jac_err < 1e-5 && (mass - 1.0).abs() < 1e-2,
        format!("round trip max err {rt:.1e} over 1000 points (<1e-10); log-det vs numeric Jacobian d=4 {jac_err:.1e} (<1e-5); d=2 mass {mass:.5} (1 +- 1e-2)"),
    )
}

// ---- 4, 5: GMEG ----

struct GmegRun {
    model: GmegModel,
    logs: Vec<EpochLog>,
    secs: f64,
}

fn emotion_task() -> Result<(Corpus, Corpus)> {
    let c = gen_emotion_corpus(&EmotionConfig::new(3, 25, 32, 16, 7))?;
    Ok(c.split_holdout(5))
}

fn train_gmeg(train: &Corpus, unimodal: bool) -> Result<GmegRun> {
    let t0 = Instant::now();
    let mut cfg = GmegConfig::for_corpus(train);
    let s = StackConfig::new(2, 32, 4, 64)?;
    cfg.encoder = s;
    cfg.mapper = s;
    cfg.decoder = s;
    cfg.unimodal = unimodal;
    let mut model = GmegModel::new(cfg, 1)?;
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 4,
        seed: 3,
        adam: AdamConfig {
            lr: 5e-4,
            ..Default::default()
        },
        prev_dropout: 0.8,
        kl_warmup: 0,
    };
    let mut adam = Adam::new(model.params(), tc.adam);
    let logs = model.train(train, &tc, &mut adam, 0, |_, _| Ok(()))?;
    Ok(GmegRun {
        model,
        logs,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn criterion_4(run: &GmegRun, train: &Corpus, held: &Corpus) -> Result<Outcome> {
    let m = &run.model;
    let k = m.config().k;
    let (zd, wd) = (m.config().z_dim, m.config().w_dim);
    let mut cls = 0;
    for r in &held.records {
        if Some(m.classify(&r.coefs, &r.audio)?) == r.label {
            cls += 1;
        }
    }
    let oracle = OracleClassifier::fit(train)?;
    let mut rng = seeded(99);
    let (mut hits, mut n) = (0, 0);
    for r in &held.records {
        for e in 0..k {
            let nw = normal_vec(&mut rng, wd);
            let nz = normal_vec(&mut rng, zd);
            let y = m.generate(&r.audio, r.speaker, EmotionSpec::Label(e), &nw, &nz)?;
            hits += usize::from(oracle.predict(&y) == e);
            n += 1;
        }
    }
    let mut pts = Vec::new();
    for e in 0..k {
        for _ in 0..30 {
            let nw = normal_vec(&mut rng, wd);
            let nz = normal_vec(&mut rng, zd);
            pts.push((m.sample_latent(e, &nw, &nz)?, e));
        }
    }
    let sil = cluster_separation(&pts)?;
    let cls_acc = cls as f64 / held.len() as f64;
    let gen_acc = hits as f64 / n as f64;
    outcome(
        cls_acc >= 0.9 && gen_acc >= 0.9 && sil > 0.3,
        format!(
            "held-out classification {cls}/{} = {cls_acc:.3} (>=0.9); generated oracle accuracy {hits}/{n} = {gen_acc:.3} (>=0.9); \
             latent silhouette {sil:.3} (>0.3); {} epochs, train {:.0}s, rec {:.3} -> {:.3}",
            held.len(),
            run.logs.len(),
            run.secs,
            run.logs[0].terms.rec,
            run.logs.last().unwrap().terms.rec
        ),
    )
}

struct SweepStats {
    e_ppl: f64,
    /// Path length over endpoint distance; 1 for a straight path.
    straightness: f64,
    endpoint_acc: f64,
    e_pdv: f64,
    rho: Vec<f64>,
    endpoints_ok: bool,
}

/// Sweeps every emotion pair for every held-out record with the same noise.
fn sweep(m: &GmegModel, held: &Corpus, oracle: &OracleClassifier) -> Result<SweepStats> {
    let k = m.config().k;
    let (zd, wd) = (m.config().z_dim, m.config().w_dim);
    let alphas: Vec<f64> = (0..PATH_LEN)
        .map(|i| i as f64 / (PATH_LEN - 1) as f64)
        .collect();
    let (mut ppl, mut pdv, mut rho, mut ratio) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut endpoints_ok = true;
    let mut hits = 0;
    for (i, r) in held.records.iter().enumerate() {
        let mut rng = seeded(1000 + i as u64);
        let nw = normal_vec(&mut rng, wd);
        let nz = normal_vec(&mut rng, zd);
        let u = uniform(&mut rng);
        for e1 in 0..k {
            for e2 in e1 + 1..k {
                let gen = |spec| m.generate(&r.audio, r.speaker, spec, &nw, &nz);
                let path = alphas
                    .iter()
                    .map(|&alpha| {
                        gen(EmotionSpec::Blend {
                            e1,
                            e2,
                            alpha,
                            mode: InterpMode::MomentBlend,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let p1: Vec<f64> = path.iter().map(|y| oracle.probs(y)[e1]).collect();
                rho.push(spearman(&alphas, &p1));
                ppl.push(e_ppl(&path, |y| oracle.embed_sequence(y))?);
                let ends = l2(
                    &oracle.embed_sequence(&path[0]),
                    &oracle.embed_sequence(&path[PATH_LEN - 1]),
                );
                ratio.push(ppl.last().unwrap() * (PATH_LEN - 1) as f64 / ends);
                hits += usize::from(oracle.predict(&path[0]) == e2)
                    + usize::from(oracle.predict(&path[PATH_LEN - 1]) == e1);
                pdv.push(e_pdv(&path, |y| oracle.embed_sequence(y))?);

                let (y1, y2) = (gen(EmotionSpec::Label(e1))?, gen(EmotionSpec::Label(e2))?);
                for mode in [InterpMode::MomentBlend, InterpMode::Mixture { u }] {
                    let a1 = gen(EmotionSpec::Blend {
                        e1,
                        e2,
                        alpha: 1.0,
                        mode,
                    })?;
                    let a0 = gen(EmotionSpec::Blend {
                        e1,
                        e2,
                        alpha: 0.0,
                        mode,
                    })?;
                    endpoints_ok &= a1.data() == y1.data() && a0.data() == y2.data();
                }
                endpoints_ok &=
                    path[PATH_LEN - 1].data() == y1.data() && path[0].data() == y2.data();
            }
        }
    }
    let endpoint_acc = hits as f64 / (2 * ppl.len()) as f64;
    Ok(SweepStats {
        e_ppl: mean(&ppl),
        straightness: mean(&ratio),
        endpoint_acc,
        e_pdv: mean(&pdv),
        rho,
        endpoints_ok,
    })
}

fn criterion_5(gm: &GmegRun, uni: &GmegRun, train: &Corpus, held: &Corpus) -> Result<Outcome> {
    let oracle = OracleClassifier::fit(train)?;
    let g = sweep(&gm.model, held, &oracle)?;
    let u = sweep(&uni.model, held, &oracle)?;
    let rho_mean = mean(&g.rho);
    let rho_min = g.rho.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        g.e_ppl < u.e_ppl && g.e_pdv < u.e_pdv && rho_mean > 0.9 && g.endpoints_ok && u.endpoints_ok,
        format!(
            "E-PPL GM {:.4} vs unimodal {:.4}; E-PDV GM {:.3e} vs unimodal {:.3e} (GM lower); p(e1) Spearman mean {rho_mean:.3} (>0.9), \
             min {rho_min:.3} over {} paths of {PATH_LEN}; endpoints bitwise {} / {}; \
             diagnostics GM / unimodal: endpoint oracle accuracy {:.3} / {:.3}, path length over endpoint distance {:.3} / {:.3}",
            g.e_ppl,
            u.e_ppl,
            g.e_pdv,
            u.e_pdv,
            g.rho.len(),
            g.endpoints_ok,
            u.endpoints_ok,
            g.endpoint_acc,
            u.endpoint_acc,
            g.straightness,
            u.straightness
        ),
    )
}

// ---- 6: NFMG ----

struct NfmgRun {
    model: NfmgModel,
    secs: f64,
}

fn motion_task() -> Result<(Corpus, Corpus)> {
    let c = gen_motion_corpus(&MotionConfig::new(8, 50, 32, 5, Modality::Bimodal))?;
    Ok(c.split_holdout(4))
}

fn train_nfmg(train: &Corpus, flow_prior: bool) -> Result<NfmgRun> {
    let t0 = Instant::now();
    let mut cfg = NfmgConfig::for_corpus(train);
    let s = StackConfig::new(2, 32, 4, 64)?;
    cfg.encoder = s;
    cfg.decoder = s;
    cfg.latent_dim = 4;
    cfg.flow_prior = flow_prior;
    let mut model = NfmgModel::new(cfg, 1)?;
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 4,
        seed: 2,
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        prev_dropout: 0.9,
        kl_warmup: 10,
    };
    model.pretrain(train, &tc)?;
    Ok(NfmgRun {
        model,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn sample_div(m: &NfmgModel, held: &Corpus) -> Result<Vec<f64>> {
    let mut rng = seeded(77);
    let d = m.config().latent_dim;
    held.records
        .iter()
        .take(4)
        .map(|r| {
            let s = (0..20)
                .map(|_| m.sample_motion(&r.audio, r.speaker, &normal_vec(&mut rng, d)))
                .collect::<Result<Vec<_>>>()?;
            div_motion(&s)
        })
        .collect()
}

fn criterion_6(fl: &NfmgRun, nm: &NfmgRun, held: &Corpus) -> Result<Outcome> {
    let df = sample_div(&fl.model, held)?;
    let dn = sample_div(&nm.model, held)?;
    let (mf, mn) = (mean(&df), mean(&dn));
    let (lf, ln) = fl.model.latent_log_likelihood(held, 10, 5)?;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    outcome(
        mf > mn && mn > 0.0 && lf > ln,
        format!(
            "Div over 20 samples, flow {mf:.4} [{}] vs normal prior {mn:.4} [{}] (flow > normal > 0); \
             held-out latent log-likelihood flow {lf:.3} vs N(0,I) {ln:.3} (flow higher); train {:.0}s / {:.0}s",
            fmt(&df),
            fmt(&dn),
            fl.secs,
            nm.secs
        ),
    )
}

// ---- 7: metrics ----

fn rotation_motion(t: usize, f: impl Fn(f64) -> [f64; 3]) -> Tensor {
    let mut data = vec![0.0; t * MOTION_DIM];
    for i in 0..t {
        data[i * MOTION_DIM..i * MOTION_DIM + 3].copy_from_slice(&f(i as f64));
    }
    Tensor::matrix(t, MOTION_DIM, data).unwrap()
}

fn criterion_7() -> Result<Outcome> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let pair = vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]];
    checks.push(("div pair = 6", (div(&pair)? - 6.0).abs() < 1e-12));
    checks.push(("div identical = 0", div(&vec![vec![0.5, -1.0]; 4])? == 0.0));
    checks.push(("div of one rejected", div(&pair[..1]).is_err()));
    let a = rotation_motion(4, |t| [t, 0.0, 0.0]);
    let b = rotation_motion(4, |t| [t + 1.0, 2.0, 0.0]);
    checks.push((
        "div_motion pair = 3",
        (div_motion(&[a, b])? - 3.0).abs() < 1e-12,
    ));

    let m = BeatTrack::new(vec![10])?;
    let au = BeatTrack::new(vec![7, 20])?;
    checks.push((
        "ba = e^-0.5",
        (beat_align(&m, &au, 3.0)? - (-0.5f64).exp()).abs() < 1e-12,
    ));
    let same = BeatTrack::new(vec![2, 9, 17])?;
    checks.push(("ba self = 1", beat_align(&same, &same, BA_SIGMA)? == 1.0));
    checks.push((
        "ba empty rejected",
        beat_align(&BeatTrack::default(), &au, 3.0).is_err(),
    ));
    let s = rotation_motion(32, |t| [(2.0 * PI * t / 16.0).sin(), 0.0, 0.0]);
    checks.push((
        "motion beats of sine",
        extract_motion_beats(&s)?.beats() == [4, 12, 20, 28],
    ));

    let gt = Tensor::matrix(10, 3, normal_vec(&mut seeded(51), 30))?;
    checks.push(("pcm self = 1", pcm(&gt, &gt, PCM_TAU)? == 1.0));
    let off = Tensor::matrix(10, 3, gt.data().iter().map(|v| v + 2.0).collect())?;
    checks.push(("pcm far = 0", pcm(&off, &gt, 1.0)? == 0.0));
    let grid = Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0])?;
    let edge = Tensor::matrix(2, 3, grid.data().iter().map(|v| v + 0.5).collect())?;
    checks.push(("pcm strict at tau", pcm(&edge, &grid, 0.5)? == 0.0));

    let id = |v: &Vec<f64>| v.clone();
    let (p, q) = (vec![0.0, 0.0], vec![3.0, 4.0]);
    let alt: Vec<Vec<f64>> = (0..PATH_LEN)
        .map(|i| if i % 2 == 0 { p.clone() } else { q.clone() })
        .collect();
    checks.push((
        "e-ppl alternating = 5",
        (e_ppl(&alt, id)? - 5.0).abs() < 1e-12,
    ));
    let even: Vec<Vec<f64>> = (0..PATH_LEN).map(|i| vec![0.25 * i as f64]).collect();
    checks.push(("e-pdv even steps = 0", e_pdv(&even, id)?.abs() < 1e-12));
    let mut x = 0.0;
    let mut steps = vec![vec![x]];
    for i in 0..16 {
        x += if i % 2 == 0 { 1.0 } else { 3.0 };
        steps.push(vec![x]);
    }
    checks.push((
        "e-pdv steps 1,3 = 1",
        (e_pdv(&steps, id)? - 1.0).abs() < 1e-12,
    ));

    let two = [
        (vec![0.0], 0),
        (vec![0.1], 0),
        (vec![10.0], 1),
        (vec![10.1], 1),
    ];
    // a(i) = 0.1, b(i) = mean distance to the other cluster
    let expect = mean(&[
        (1.0 - 0.1 / 10.05),
        (1.0 - 0.1 / 9.95),
        (1.0 - 0.1 / 9.95),
        (1.0 - 0.1 / 10.05),
    ]);
    checks.push((
        "silhouette two clusters",
        (cluster_separation(&two)? - expect).abs() < 1e-12,
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!("{} analytic checks, failed: {failed:?}", checks.len()),
    )
}

// ---- 8: persistence and determinism ----

fn criterion_8() -> Result<Outcome> {
    let mut ecfg = EmotionConfig::new(3, 2, 8, 6, 61);
    ecfg.audio_dim = 4;
    let c1 = gen_emotion_corpus(&ecfg)?;
    let c2 = gen_emotion_corpus(&ecfg)?;
    let data_same = c1.to_bytes() == c2.to_bytes();
    let m1 = gen_motion_corpus(&MotionConfig::new(2, 2, 8, 62, Modality::Bimodal))?;
    let m2 = gen_motion_corpus(&MotionConfig::new(2, 2, 8, 62, Modality::Bimodal))?;
    let motion_same = m1.to_bytes() == m2.to_bytes();

    let mut gc = GmegConfig::new(3, 6, 4, 2);
    gc.z_dim = 4;
    gc.w_dim = 4;
    gc.encoder = small_stack();
    gc.mapper = small_stack();
    gc.decoder = small_stack();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 2,
        seed: 63,
        ..Default::default()
    };
    let epoch0 = || -> Result<(GmegModel, Adam, Vec<EpochLog>)> {
        let mut m = GmegModel::new(gc.clone(), 64)?;
        let mut adam = Adam::new(m.params(), tc.adam);
        let logs = m.train(&c1, &tc, &mut adam, 0, |_, _| Ok(()))?;
        Ok((m, adam, logs))
    };
    let (ga, adam, la) = epoch0()?;
    let (gb, _, lb) = epoch0()?;
    let train_same = la == lb
        && ga
            .params()
            .iter()
            .zip(gb.params().iter())
            .all(|(a, b)| a.1.data() == b.1.data());

    let r = &c1.records[0];
    let noise = normal_vec(&mut seeded(65), 4);
    let ck = Checkpoint {
        model: Model::Gmeg(ga.clone()),
        seed: 64,
        epoch: 1,
        optimizer: Some(adam),
    };
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let reloaded = back.clone().into_gmeg()?.0;
    let gen =
        |m: &GmegModel| m.generate(&r.audio, r.speaker, EmotionSpec::Label(1), &noise, &noise);
    let gmeg_rt = back.to_bytes() == bytes && gen(&ga)?.data() == gen(&reloaded)?.data();

    let mut nc = NfmgConfig::new(m1.audio_dim, 2);
    nc.latent_dim = 4;
    nc.encoder = small_stack();
    nc.decoder = small_stack();
    nc.coupling = small_stack();
    nc.n_flow_steps = 2;
    let nm = NfmgModel::new(nc, 66)?;
    let nb = Checkpoint {
        model: Model::Nfmg(nm.clone()),
        seed: 66,
        epoch: 0,
        optimizer: None,
    }
    .to_bytes();
    let nback = Checkpoint::from_bytes(&nb)?;
    let nre = nback.clone().into_nfmg()?.0;
    let mr = &m1.records[0];
    let nfmg_rt = nback.to_bytes() == nb
        && nm.sample_motion(&mr.audio, mr.speaker, &noise)?.data()
            == nre.sample_motion(&mr.audio, mr.speaker, &noise)?.data();

    outcome(
        data_same && motion_same && train_same && gmeg_rt && nfmg_rt,
        format!(
            "gen-data rerun identical emotion {data_same} motion {motion_same}; epoch-0 training identical {train_same}; \
             checkpoint round trip bitwise gmeg {gmeg_rt} nfmg {nfmg_rt}"
        ),
    )
}

fn verdict<T>(trained: &Result<T>, check: impl FnOnce(&T) -> Result<Outcome>) -> Verdict {
    match trained {
        Ok(t) => check(t).map_err(|e| e.to_string()),
        Err(e) => Err(format!("training failed: {e}")),
    }
}

fn main() {
    let start = Instant::now();
    let mut all = true;
    let (etrain, eheld) = emotion_task().expect("emotion corpus");
    let (mtrain, mheld) = motion_task().expect("motion corpus");
    std::thread::scope(|scope| {
        let gm = scope.spawn(|| train_gmeg(&etrain, false));
        let uni = scope.spawn(|| train_gmeg(&etrain, true));
        let fl = scope.spawn(|| train_nfmg(&mtrain, true));
        let nm = scope.spawn(|| train_nfmg(&mtrain, false));

        let t = Instant::now();
        all &= report(
            1,
            "gradient suite",
            t,
            criterion_1().map_err(|e| e.to_string()),
        );
        let t = Instant::now();
        all &= report(
            2,
            "distribution oracles",
            t,
            criterion_2().map_err(|e| e.to_string()),
        );
        let t = Instant::now();
        all &= report(
            3,
            "flow correctness",
            t,
            criterion_3().map_err(|e| e.to_string()),
        );

        let gm = gm.join().expect("gmeg thread");
        let uni = uni.join().expect("unimodal thread");
        let t = Instant::now();
        all &= report(
            4,
            "GMEG recovery",
            t,
            verdict(&gm, |g| criterion_4(g, &etrain, &eheld)),
        );
        let t = Instant::now();
        let r5 = match (&gm, &uni) {
            (Ok(g), Ok(u)) => criterion_5(g, u, &etrain, &eheld).map_err(|e| e.to_string()),
            (Err(e), _) | (_, Err(e)) => Err(format!("training failed: {e}")),
        };
        all &= report(5, "interpolation smoothness", t, r5);

        let fl = fl.join().expect("flow thread");
        let nm = nm.join().expect("normal-prior thread");
        let t = Instant::now();
        let r6 = match (&fl, &nm) {
            (Ok(f), Ok(n)) => criterion_6(f, n, &mheld).map_err(|e| e.to_string()),
            (Err(e), _) | (_, Err(e)) => Err(format!("training failed: {e}")),
        };
        all &= report(6, "NFMG diversity ablation", t, r6);
    });
    let t = Instant::now();
    all &= report(
        7,
        "metric unit suite",
        t,
        criterion_7().map_err(|e| e.to_string()),
    );
    let t = Instant::now();
    all &= report(
        8,
        "persistence and determinism",
        t,
        criterion_8().map_err(|e| e.to_string()),
    );
    println!(
        "acceptance: {} ({:.0}s)",
        if all { "all criteria PASS" } else { "FAILED" },
        start.elapsed().as_secs_f64()
    );
    if !all {
        std::process::exit(1);
    }
}
