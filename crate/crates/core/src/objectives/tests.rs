use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn small_head() -> HeadConfig {
    HeadConfig {
        hidden: 6,
        bottleneck: 4,
        prototypes: 5,
    }
}

fn bank(num_aux: usize, shared: bool, kind: BaseLossKind) -> HeadBank {
    HeadBank::new(small_head(), 3, num_aux, shared, kind)
}

// ---- head oracle with explicit loops ----

fn o_lin(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|j| (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>() + b.data()[j])
        .collect()
}

fn o_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn o_unit(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / n).collect()
}

fn o_head(p: &ParamStore<f64>, pre: &str, x: &[f64]) -> Vec<f64> {
    let g = |s: &str| p.get(&format!("{pre}.{s}")).unwrap();
    let h: Vec<f64> = o_lin(x, g("fc1.weight"), g("fc1.bias")).into_iter().map(o_gelu).collect();
    let h: Vec<f64> = o_lin(&h, g("fc2.weight"), g("fc2.bias")).into_iter().map(o_gelu).collect();
    let z = o_unit(&o_lin(&h, g("fc3.weight"), g("fc3.bias")));
    let proto = g("proto.weight");
    let bn = proto.shape()[1];
    proto
        .data()
        .chunks(bn)
        .map(|row| o_unit(row).iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect()
}

fn fuse(b: &HeadBank, p: &ParamStore<f64>, ta: &Tensor<f64>, tp: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let tape = Tape::no_grad();
    let bound = p.bind(&tape, |_| false);
    let (f, outs) = b.project_fuse(&bound, tape.constant(ta.clone()), tape.constant(tp.clone())).unwrap();
    ((*f.value()).clone(), outs.iter().map(|o| (*o.value()).clone()).collect())
}

#[test]
fn fusion_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..100 {
        let hb = bank(5, false, BaseLossKind::Clustering);
        let mut p = ParamStore::new();
        hb.init(&mut p, trial);
        let ta = rand_t(&mut rng, &[2, 2, 3]);
        let tp = rand_t(&mut rng, &[2, 3, 3]);
        let (fused, per) = fuse(&hb, &p, &ta, &tp);
        assert_eq!(per.len(), 5);
        for b in 0..2 {
            let mut want = vec![0.0; 5];
            for i in 0..5 {
                let (src, j) = if i < 2 { (&ta, i) } else { (&tp, i - 2) };
                let tok: Vec<f64> = (0..3).map(|c| src.at(&[b, j, c])).collect();
                let h = o_head(&p, &format!("head.aux.{i}"), &tok);
                for (w, v) in want.iter_mut().zip(&h) {
                    *w += v / 5.0;
                }
                for c in 0..5 {
                    assert!((per[i].at(&[b, c]) - h[c]).abs() < 1e-12);
                }
            }
            for c in 0..5 {
                assert!((fused.at(&[b, c]) - want[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_token_fusion_is_that_head() {
    let hb = bank(1, false, BaseLossKind::Clustering);
    let mut p = ParamStore::new();
    hb.init(&mut p, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ta = rand_t(&mut rng, &[2, 1, 3]);
    let (fused, per) = fuse(&hb, &p, &ta, &Tensor::zeros(&[2, 0, 3]));
    assert_eq!(fused, per[0]);
}

#[test]
fn identical_heads_and_tokens_fuse_to_one_output() {
    let hb = bank(4, false, BaseLossKind::Clustering);
    let mut p = ParamStore::new();
    hb.init(&mut p, 2);
    let names: Vec<String> = p.names().filter(|n| n.starts_with("head.aux.0.")).map(String::from).collect();
    for n in &names {
        let t = p.get(n).unwrap().clone();
        for i in 1..4 {
            p.insert(n.replace("aux.0", &format!("aux.{i}")), t.clone());
        }
    }
    let tok = Tensor::from_fn(&[1, 1, 3], |i| i as f64 - 0.5);
    let ta = Tensor::new(&[1, 2, 3], [tok.data(), tok.data()].concat()).unwrap();
    let (fused, per) = fuse(&hb, &p, &ta, &ta);
    assert!(fused.max_abs_diff(&per[0]) < 1e-15);
}

#[test]
fn fusion_needs_tokens() {
    let hb = bank(0, false, BaseLossKind::Clustering);
    let mut p = ParamStore::new();
    hb.init(&mut p, 0);
    let tape = Tape::no_grad();
    let bound = p.bind(&tape, |_| false);
    let e = tape.constant(Tensor::<f64>::zeros(&[1, 0, 3]));
    assert!(matches!(hb.project_fuse(&bound, e, e), Err(Error::Usage(_))));
}

#[test]
fn shared_and_independent_banks() {
    let (mut a, mut b) = (ParamStore::<f64>::new(), ParamStore::<f64>::new());
    bank(10, true, BaseLossKind::Clustering).init(&mut a, 0);
    bank(10, false, BaseLossKind::Clustering).init(&mut b, 0);
    assert_eq!(a.names().filter(|n| n.ends_with("fc1.weight")).count(), 2);
    assert_eq!(b.names().filter(|n| n.ends_with("fc1.weight")).count(), 11);
    assert!(a.num_params() < b.num_params());
    let hb = bank(10, true, BaseLossKind::Clustering);
    assert!((0..10).all(|i| hb.aux_prefix(i) == "head.shared"));
    let mut c = ParamStore::<f64>::new();
    bank(2, false, BaseLossKind::Cosine).init(&mut c, 0);
    assert!(c.names().all(|n| !n.contains("proto")));
}

#[test]
fn prototype_rows_are_unit_length() {
    let mut p = ParamStore::<f64>::new();
    bank(2, false, BaseLossKind::Clustering).init(&mut p, 0);
    p.get_mut("head.aux.1.proto.weight").unwrap().data_mut()[0] += 3.0;
    normalize_prototypes(&mut p);
    for (n, t) in p.iter().filter(|(n, _)| n.ends_with("proto.weight")) {
        for row in t.data().chunks(4) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "{n}");
        }
    }
}

// ---- base losses ----

fn loss_value(t: &Tensor<f64>, s: &Tensor<f64>, kind: BaseLossKind, center: Option<&Tensor<f64>>, nce: f64) -> Result<f64, Error> {
    let tape = Tape::new();
    let cfg = LossConfig {
        kind,
        nce_temp: nce,
        ..LossConfig::default()
    };
    let l = base_loss(tape.constant(t.clone()), tape.param(s.clone()), &cfg, center)?;
    Ok(l.value().item())
}

#[test]
fn cosine_loss_extremes() {
    let a = Tensor::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    assert!(loss_value(&a, &a, BaseLossKind::Cosine, None, 0.2).unwrap().abs() < 1e-15);
    let x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let y = Tensor::new(&[1, 2], vec![0.0, 3.0]).unwrap();
    assert!((loss_value(&x, &y, BaseLossKind::Cosine, None, 0.2).unwrap() - 2.0).abs() < 1e-15);
    let z = Tensor::zeros(&[1, 2]);
    assert!(matches!(loss_value(&z, &y, BaseLossKind::Cosine, None, 0.2), Err(Error::Numeric(_))));
}

#[test]
fn clustering_loss_on_uniform_logits_is_log_p() {
    let t = Tensor::full(&[3, 7], 0.3);
    let s = Tensor::full(&[3, 7], -1.2);
    let c = Tensor::zeros(&[7]);
    let l = loss_value(&t, &s, BaseLossKind::Clustering, Some(&c), 0.2).unwrap();
    assert!((l - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn infonce_two_by_two_by_hand() {
    let v = Tensor::new(&[2, 2], vec![3.0, 4.0, 1.0, 0.0]).unwrap();
    let l = loss_value(&v, &v, BaseLossKind::Infonce, None, 1.0).unwrap();
    // unit rows (0.6, 0.8) and (1, 0): similarity 1 on the diagonal, 0.6 off it
    let row = -(1f64.exp() / (1f64.exp() + 0.6f64.exp())).ln();
    assert!((l - row).abs() < 1e-12);
}

#[test]
fn clustering_step_toward_target_lowers_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_t(&mut rng, &[4, 6]);
    let s = rand_t(&mut rng, &[4, 6]);
    let c = rand_t(&mut rng, &[6]).map(|v| 0.1 * v);
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let sv = tape.param(s.clone());
    let l = base_loss(tape.constant(t.clone()), sv, &cfg, Some(&c)).unwrap();
    let g = tape.backward(l).unwrap().get_or_zeros(sv);
    let stepped = Tensor::from_fn(s.shape(), |i| s.data()[i] - 1e-3 * g.data()[i]);
    let before = l.value().item();
    let after = loss_value(&t, &stepped, BaseLossKind::Clustering, Some(&c), 0.2).unwrap();
    assert!(after < before);
}

// ---- pretraining objective ----

struct Toy {
    t_fused: [Tensor<f64>; 2],
    t_global: [Tensor<f64>; 2],
    s_fused: [Tensor<f64>; 2],
    s_global: [Tensor<f64>; 2],
    centers: Centers<f64>,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Centers {
        fused: rand_t(&mut rng, &[5]).map(|v| 0.3 * v),
        global: Tensor::full(&[5], 0.1),
    };
    let mut r = || rand_t(&mut rng, &[3, 5]);
    Toy {
        t_fused: [r(), r()],
        t_global: [r(), r()],
        s_fused: [r(), r()],
        s_global: [r(), r()],
        centers,
    }
}

fn pretrain(toy: &Toy, kind: BaseLossKind, mode: LossMode) -> (f64, f64, f64) {
    let tape = Tape::new();
    let c = |x: &Tensor<f64>| tape.constant(x.clone());
    let teacher = [0, 1].map(|v| StreamOutputs {
        fused: Some(c(&toy.t_fused[v])),
        global: c(&toy.t_global[v]),
    });
    let student = [0, 1].map(|v| StreamOutputs {
        fused: Some(c(&toy.s_fused[v])),
        global: c(&toy.s_global[v]),
    });
    let cfg = LossConfig {
        kind,
        ..LossConfig::default()
    };
    let parts = pretrain_loss(&teacher, &student, &cfg, &toy.centers, mode).unwrap();
    (parts.total.value().item(), parts.fused.value().item(), parts.distill.value().item())
}

#[test]
fn pretrain_loss_is_the_sum_of_base_losses() {
    for kind in [BaseLossKind::Clustering, BaseLossKind::Cosine, BaseLossKind::Infonce] {
        for seed in 0..5 {
            let t = toy(seed);
            let f = Some(&t.centers.fused);
            let g = Some(&t.centers.global);
            let b = |x: &Tensor<f64>, y: &Tensor<f64>, c| loss_value(x, y, kind, c, 0.2).unwrap();
            let (total, lc, ld) = pretrain(&t, kind, LossMode::Distill);
            let want_c = 0.5 * (b(&t.t_fused[0], &t.s_fused[1], f) + b(&t.t_fused[1], &t.s_fused[0], f));
            let want_d = 0.5 * (b(&t.t_fused[0], &t.s_global[1], f) + b(&t.t_fused[1], &t.s_global[0], f));
            assert!((lc - want_c).abs() < 1e-12);
            assert!((ld - want_d).abs() < 1e-12);
            assert!((total - want_c - want_d).abs() < 1e-12);

            let (_, lc2, ld2) = pretrain(&t, kind, LossMode::NoDistill);
            let want_g = 0.5 * (b(&t.t_global[0], &t.s_global[1], g) + b(&t.t_global[1], &t.s_global[0], g));
            assert_eq!(lc2, lc);
            assert!((ld2 - want_g).abs() < 1e-12);
            assert!((ld2 - ld).abs() > 1e-9);

            let (total3, lc3, ld3) = pretrain(&t, kind, LossMode::GlobalOnly);
            assert_eq!(lc3, 0.0);
            assert_eq!(ld3, ld2);
            assert_eq!(total3, ld3);
        }
    }
}

#[test]
fn equal_student_streams_double_the_fused_term() {
    let mut t = toy(9);
    t.s_global = t.s_fused.clone();
    let (total, lc, _) = pretrain(&t, BaseLossKind::Clustering, LossMode::Distill);
    assert!((total - 2.0 * lc).abs() < 1e-12);
}

#[test]
fn teacher_side_receives_no_gradient() {
    let t = toy(4);
    for kind in [BaseLossKind::Clustering, BaseLossKind::Cosine, BaseLossKind::Infonce] {
        let tape = Tape::new();
        let p = |x: &Tensor<f64>| tape.param(x.clone());
        let teacher = [0, 1].map(|v| StreamOutputs {
            fused: Some(p(&t.t_fused[v])),
            global: p(&t.t_global[v]),
        });
        let student = [0, 1].map(|v| StreamOutputs {
            fused: Some(p(&t.s_fused[v])),
            global: p(&t.s_global[v]),
        });
        let cfg = LossConfig {
            kind,
            ..LossConfig::default()
        };
        for mode in [LossMode::Distill, LossMode::NoDistill] {
            let parts = pretrain_loss(&teacher, &student, &cfg, &t.centers, mode).unwrap();
            let g = tape.backward(parts.total).unwrap();
            for s in &teacher {
                assert!(g.get_or_zeros(s.fused.unwrap()).data().iter().all(|&v| v == 0.0));
                assert!(g.get_or_zeros(s.global).data().iter().all(|&v| v == 0.0));
            }
            assert!(g.get_or_zeros(student[0].global).l2_norm() > 0.0);
        }
    }
}

// ---- teacher maintenance ----

#[test]
fn ema_examples() {
    let mut s = ParamStore::<f64>::new();
    s.insert("w", Tensor::full(&[3], 2.0));
    let mut t = ParamStore::<f64>::new();
    t.insert("w", Tensor::full(&[3], 1.0));
    let orig = t.clone();
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(t, orig);
    ema_update(&mut t, &s, 0.9).unwrap();
    assert!(t.get("w").unwrap().data().iter().all(|v| (v - 1.1).abs() < 1e-12));
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t, s);
    let mut bad = ParamStore::<f64>::new();
    bad.insert("v", Tensor::full(&[3], 2.0));
    assert!(matches!(ema_update(&mut t, &bad, 0.5), Err(Error::Structure(_))));
    assert!(ema_update(&mut t, &s, 1.5).is_err());
}

#[test]
fn center_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = rand_t(&mut rng, &[4, 3]);
    let mean: Vec<f64> = (0..3).map(|c| (0..4).map(|r| batch.at(&[r, c])).sum::<f64>() / 4.0).collect();
    let c0 = rand_t(&mut rng, &[3]);
    let c = center_update(&c0, &batch, 0.0).unwrap();
    for j in 0..3 {
        assert!((c.data()[j] - mean[j]).abs() < 1e-15);
    }
    let fixed = Tensor::from_fn(&[5, 3], |i| c0.data()[i % 3]);
    assert!(center_update(&c0, &fixed, 0.9).unwrap().max_abs_diff(&c0) < 1e-15);

    let b2 = rand_t(&mut rng, &[2, 3]);
    let two = center_update(&center_update(&c0, &batch, 0.7).unwrap(), &b2, 0.7).unwrap();
    for j in 0..3 {
        let m2 = (b2.at(&[0, j]) + b2.at(&[1, j])) / 2.0;
        let want = 0.7 * (0.7 * c0.data()[j] + 0.3 * mean[j]) + 0.3 * m2;
        assert!((two.data()[j] - want).abs() < 1e-12);
    }
}

// ---- supervised ----

fn sup(
    p: &ParamStore<f64>,
    bank: &ClassifierBank,
    zc: &Tensor<f64>,
    ta: &Tensor<f64>,
    tp: &Tensor<f64>,
    y: &[usize],
) -> Result<(f64, f64, f64, Tensor<f64>, Tensor<f64>), Error> {
    let tape = Tape::no_grad();
    let b = p.bind(&tape, |_| false);
    let c = |x: &Tensor<f64>| tape.constant(x.clone());
    let o = supervised_loss(&b, bank, c(zc), c(ta), c(tp), y)?;
    Ok((
        o.loss.value().item(),
        o.ce_aux.value().item(),
        o.ce_distill.value().item(),
        (*o.aux_probs.unwrap().value()).clone(),
        (*o.global_probs.value()).clone(),
    ))
}

#[test]
fn supervised_toy_by_hand() {
    let bank = ClassifierBank {
        dim: 2,
        classes: 2,
        num_aux: 2,
        shared: false,
    };
    let mut p = ParamStore::new();
    p.insert("cls.global.weight", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    p.insert("cls.aux.0.weight", Tensor::new(&[2, 2], vec![0.5, -0.5, 1.0, 0.0]).unwrap());
    p.insert("cls.aux.1.weight", Tensor::new(&[2, 2], vec![0.0, 2.0, -1.0, 1.0]).unwrap());
    let zc = Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap();
    let ta = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
    let tp = Tensor::new(&[1, 1, 2], vec![-1.0, 0.5]).unwrap();
    let (loss, ce_aux, ce_d, lt, lc) = sup(&p, &bank, &zc, &ta, &tp, &[1]).unwrap();
    // aux0 logits: [0.5+2, -0.5+0] = [2.5, -0.5]; aux1: [0-0.5, -2+0.5] = [-0.5, -1.5]
    let fused: [f64; 2] = [(2.5 - 0.5) / 2.0, (-0.5 - 1.5) / 2.0];
    let zt = fused[0].exp() + fused[1].exp();
    let pt = [fused[0].exp() / zt, fused[1].exp() / zt];
    let zg = 0.3f64.exp() + (-0.2f64).exp();
    let pc = [0.3f64.exp() / zg, (-0.2f64).exp() / zg];
    let want_aux = -pt[1].ln();
    let want_d = -(pt[0] * pc[0].ln() + pt[1] * pc[1].ln());
    assert!((ce_aux - want_aux).abs() < 1e-10);
    assert!((ce_d - want_d).abs() < 1e-10);
    assert!((loss - want_aux - want_d).abs() < 1e-10);
    assert!((lt.data()[0] - pt[0]).abs() < 1e-12);
    assert!((lc.data()[1] - pc[1]).abs() < 1e-12);
    assert!(matches!(sup(&p, &bank, &zc, &ta, &tp, &[2]), Err(Error::Param(_))));
}

#[test]
fn self_distillation_term_is_the_entropy_when_predictions_agree() {
    let bank = ClassifierBank {
        dim: 2,
        classes: 3,
        num_aux: 1,
        shared: false,
    };
    let w = Tensor::new(&[2, 3], vec![0.2, -1.0, 0.7, 1.3, 0.1, -0.4]).unwrap();
    let mut p = ParamStore::new();
    p.insert("cls.global.weight", w.clone());
    p.insert("cls.aux.0.weight", w);
    let z = Tensor::new(&[1, 2], vec![0.9, -0.6]).unwrap();
    let ta = z.reshape(&[1, 1, 2]).unwrap();
    let (_, _, ce_d, lt, lc) = sup(&p, &bank, &z, &ta, &Tensor::zeros(&[1, 0, 2]), &[0]).unwrap();
    assert_eq!(lt, lc);
    let h: f64 = -lt.data().iter().map(|q| q * q.ln()).sum::<f64>();
    assert!((ce_d - h).abs() < 1e-12);
}

#[test]
fn distillation_target_is_detached() {
    let bank = ClassifierBank {
        dim: 3,
        classes: 4,
        num_aux: 2,
        shared: true,
    };
    let mut p = ParamStore::<f64>::new();
    bank.init(&mut p, 5);
    assert!(p.contains("cls.shared.weight") && !p.contains("cls.aux.0.weight"));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let b = p.bind(&tape, |_| true);
    let zc = tape.param(rand_t(&mut rng, &[2, 3]));
    let ta = tape.param(rand_t(&mut rng, &[2, 1, 3]));
    let tp = tape.param(rand_t(&mut rng, &[2, 1, 3]));
    let o = supervised_loss(&b, &bank, zc, ta, tp, &[0, 3]).unwrap();
    let g = tape.backward(o.ce_distill).unwrap();
    assert_eq!(g.get_or_zeros(ta).l2_norm(), 0.0);
    assert_eq!(g.get_or_zeros(b.get("cls.shared.weight").unwrap()).l2_norm(), 0.0);
    assert!(g.get_or_zeros(zc).l2_norm() > 0.0);
}
