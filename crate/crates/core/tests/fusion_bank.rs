//! Fusion schemes, ensemble and bank against composed loop oracles.

mod common;

use common::{aem_oracle, concat, conv_block_oracle, conv_oracle, rand_tensor, sigmoid, zip_map};
use lafb::fusion::{
    adaptive_fusion_bank, aem, fuse_cb, fuse_ic, fuse_li, fuse_sv, fuse_td, BankMode, BankParams, ModalFeatures,
    Scheme, SchemeOutputs,
};
use lafb::params::ConvParams;
use lafb::tensor::{gradcheck, ConvGeometry, Graph, Tensor};
use lafb::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const C: usize = 3;

struct Raw {
    cb: ConvParams,
    sv: ConvParams,
    ic: (ConvParams, ConvParams),
    li: ConvParams,
    td: ConvParams,
    aem: (ConvParams, ConvParams),
}

fn raw(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Raw {
    let same = ConvGeometry::same3(1);
    let one = ConvGeometry::default();
    Raw {
        cb: ConvParams::uniform(c, 2 * c, 3, same, rng),
        sv: ConvParams::uniform(c, 2 * c, 3, ConvGeometry::same3(2), rng),
        ic: (
            ConvParams::uniform(2 * c, 2 * c, 3, same, rng),
            ConvParams::uniform(c, 2 * c, 3, same, rng),
        ),
        li: ConvParams::uniform(c, c, 3, same, rng),
        td: ConvParams::uniform(c, c, 3, same, rng),
        aem: (
            ConvParams::uniform(k * c, k * c, 1, one, rng),
            ConvParams::uniform(k * c, k * c, 1, one, rng),
        ),
    }
}

fn bind(g: &Graph, r: &Raw) -> BankParams {
    BankParams {
        cb: Some(r.cb.bind(g, false)),
        sv: Some(r.sv.bind(g, false)),
        ic: Some((r.ic.0.bind(g, false), r.ic.1.bind(g, false))),
        li: Some(r.li.bind(g, false)),
        td: Some(r.td.bind(g, false)),
        aem: Some((r.aem.0.bind(g, false), r.aem.1.bind(g, false))),
    }
}

fn guided_oracle(guide: &Tensor, base: &Tensor, p: &ConvParams) -> (Tensor, Tensor) {
    let w = conv_oracle(guide, &p.weight, &p.bias, p.geometry).map(sigmoid);
    let out = zip_map(&zip_map(&w, base, |a, b| a * b), base, |a, b| a + b);
    (w, out)
}

fn ic_oracle(fcat: &Tensor, inner: &ConvParams, outer: &ConvParams) -> Tensor {
    let local = conv_block_oracle(fcat, &inner.weight, &inner.bias, inner.geometry);
    let res = zip_map(&local, fcat, |a, b| a + b);
    conv_block_oracle(&res, &outer.weight, &outer.bias, outer.geometry)
}

fn scheme_oracles(fr: &Tensor, fa: &Tensor, r: &Raw) -> Vec<Tensor> {
    let fcat = concat(&[fr, fa]);
    vec![
        conv_block_oracle(&fcat, &r.cb.weight, &r.cb.bias, r.cb.geometry),
        conv_block_oracle(&fcat, &r.sv.weight, &r.sv.bias, r.sv.geometry),
        ic_oracle(&fcat, &r.ic.0, &r.ic.1),
        guided_oracle(fa, fr, &r.li).1,
        guided_oracle(fr, fa, &r.td).1,
    ]
}

fn inputs(seed: u64, shape: &[usize]) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rand_tensor(shape, &mut rng), rand_tensor(shape, &mut rng))
}

#[test]
fn each_scheme_matches_its_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let r = raw(C, 5, &mut rng);
    let (fr, fa) = inputs(101, &[2, C, 7, 6]);
    let want = scheme_oracles(&fr, &fa, &r);

    let g = Graph::new();
    let m = ModalFeatures::new(&g, 3, g.input(fr.clone()), g.input(fa.clone())).unwrap();
    assert_eq!(*g.value(m.f_cat), concat(&[&fr, &fa]));
    let p = bind(&g, &r);
    let got = [
        fuse_cb(&g, &m, &p.cb.unwrap()).unwrap(),
        fuse_sv(&g, &m, &p.sv.unwrap()).unwrap(),
        fuse_ic(&g, &m, &p.ic.unwrap().0, &p.ic.unwrap().1).unwrap(),
        fuse_li(&g, &m, &p.li.unwrap()).unwrap().1,
        fuse_td(&g, &m, &p.td.unwrap()).unwrap().1,
    ];
    for (k, (v, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!(g.shape(*v), vec![2, C, 7, 6]);
        assert!(g.value(*v).max_abs_diff(w) < 1e-12, "scheme {}", Scheme::ALL[k]);
    }
}

#[test]
fn td_is_the_mirror_of_li() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let p = ConvParams::uniform(C, C, 3, ConvGeometry::same3(1), &mut rng);
    let (fr, fa) = inputs(103, &[1, C, 5, 5]);
    let g = Graph::new();
    let m = ModalFeatures::new(&g, 2, g.input(fr), g.input(fa)).unwrap();
    let bp = p.bind(&g, false);
    let (_, td) = fuse_td(&g, &m, &bp).unwrap();
    let (_, li) = fuse_li(&g, &m.swapped(&g).unwrap(), &bp).unwrap();
    assert_eq!(*g.value(td), *g.value(li));
}

#[test]
fn guided_outputs_bounded_by_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let p = ConvParams::uniform(C, C, 3, ConvGeometry::same3(1), &mut rng);
    let (fr, fa) = inputs(105, &[2, C, 6, 6]);
    let fr = fr.map(f64::abs);
    let fa = fa.map(f64::abs);
    let g = Graph::new();
    let m = ModalFeatures::new(&g, 2, g.input(fr.clone()), g.input(fa.clone())).unwrap();
    let bp = p.bind(&g, false);
    let (w_td, li) = fuse_li(&g, &m, &bp).unwrap();
    let (w_r, td) = fuse_td(&g, &m, &bp).unwrap();
    for (out, base) in [(li, &fr), (td, &fa)] {
        for (o, f) in g.value(out).data().iter().zip(base.data()) {
            assert!(*f <= *o && *o <= 2.0 * *f);
        }
    }
    for w in [w_td.w, w_r.w] {
        assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn zeroed_inner_ic_block_reduces_to_cb() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let outer = ConvParams::uniform(C, 2 * C, 3, ConvGeometry::same3(1), &mut rng);
    let inner = ConvParams::zeros(2 * C, 2 * C, 3, ConvGeometry::same3(1));
    let (fr, fa) = inputs(107, &[1, C, 5, 4]);
    let g = Graph::new();
    let m = ModalFeatures::new(&g, 2, g.input(fr), g.input(fa)).unwrap();
    let o = outer.bind(&g, false);
    let ic = fuse_ic(&g, &m, &inner.bind(&g, false), &o).unwrap();
    let cb = fuse_cb(&g, &m, &o).unwrap();
    assert_eq!(*g.value(ic), *g.value(cb));

    let bad = ConvParams::zeros(C, 2 * C, 3, ConvGeometry::same3(1));
    assert!(matches!(fuse_ic(&g, &m, &bad.bind(&g, false), &o), Err(Error::Config(_))));
}

#[test]
fn sv_constant_field_interior() {
    let c = 2;
    let g = Graph::new();
    let m = ModalFeatures::new(
        &g,
        2,
        g.input(Tensor::full([1, c, 9, 9], 0.25)),
        g.input(Tensor::full([1, c, 9, 9], 0.25)),
    )
    .unwrap();
    let p = ConvParams::new(
        Tensor::ones([c, 2 * c, 3, 3]),
        Tensor::zeros([c]),
        ConvGeometry::same3(2),
    )
    .unwrap();
    let out = g.value(fuse_sv(&g, &m, &p.bind(&g, false)).unwrap()).clone();
    assert_eq!(out.at4(0, 1, 4, 4), 9.0 * 2.0 * c as f64 * 0.25);
}

#[test]
fn aem_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let parts: Vec<Tensor> = (0..5).map(|_| rand_tensor(&[2, C, 4, 5], &mut rng)).collect();
    let one = ConvGeometry::default();
    let pa = ConvParams::uniform(5 * C, 5 * C, 1, one, &mut rng);
    let pm = ConvParams::uniform(5 * C, 5 * C, 1, one, &mut rng);
    let refs: Vec<&Tensor> = parts.iter().collect();
    let fc = concat(&refs);
    let (v_want, fb_want) = aem_oracle(&fc, &pa.weight, &pa.bias, &pm.weight, &pm.bias);

    let g = Graph::new();
    let outs = Scheme::ALL.iter().zip(&parts).map(|(s, t)| (*s, g.input(t.clone()))).collect();
    let s = SchemeOutputs::new(&g, outs).unwrap();
    assert_eq!(*g.value(s.f_cat), fc);
    let (w, out) = aem(&g, &s, &pa.bind(&g, false), &pm.bind(&g, false)).unwrap();
    assert!(g.value(out.fb).max_abs_diff(&fb_want) < 1e-12);
    let v = g.value(w.v).clone();
    let flat: Vec<f64> = v_want.concat();
    for (a, b) in v.data().iter().zip(&flat) {
        assert!((a - b).abs() < 1e-12);
        assert!(*a > 0.0 && *a < 1.0);
    }
    // block means reconstruct the overall mean
    let overall = w.per_scheme_mean.iter().map(|(_, m)| m).sum::<f64>() / 5.0;
    assert!((overall - v.mean()).abs() < 1e-12);
    for (k, scheme) in Scheme::ALL.iter().enumerate() {
        let mut acc = 0.0;
        for vb in &v_want {
            acc += vb[k * C..(k + 1) * C].iter().sum::<f64>();
        }
        assert!((w.mean_of(*scheme).unwrap() - acc / (2 * C) as f64).abs() < 1e-12);
    }
    // FB = V * f_C entrywise
    let fbv = g.value(out.fb).clone();
    for b in 0..2 {
        for ch in 0..5 * C {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(fbv.at4(b, ch, y, x), v.at4(b, ch, 0, 0) * fc.at4(b, ch, y, x));
                }
            }
        }
    }
}

#[test]
fn zero_aem_halves_the_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let parts: Vec<Tensor> = (0..5).map(|_| rand_tensor(&[1, 2, 3, 3], &mut rng)).collect();
    let g = Graph::new();
    let outs = Scheme::ALL.iter().zip(&parts).map(|(s, t)| (*s, g.input(t.clone()))).collect();
    let s = SchemeOutputs::new(&g, outs).unwrap();
    let z = ConvParams::zeros(10, 10, 1, ConvGeometry::default());
    let (w, out) = aem(&g, &s, &z.bind(&g, false), &z.bind(&g, false)).unwrap();
    assert!(g.value(w.v).data().iter().all(|&v| v == 0.5));
    assert_eq!(*g.value(out.fb), g.value(s.f_cat).map(|v| 0.5 * v));

    let wrong = ConvParams::zeros(8, 10, 1, ConvGeometry::default());
    assert!(matches!(
        aem(&g, &s, &wrong.bind(&g, false), &z.bind(&g, false)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn full_bank_equals_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let r = raw(C, 5, &mut rng);
    let (fr, fa) = inputs(111, &[2, C, 6, 6]);
    let parts = scheme_oracles(&fr, &fa, &r);
    let refs: Vec<&Tensor> = parts.iter().collect();
    let fc = concat(&refs);
    let (_, fb_want) = aem_oracle(&fc, &r.aem.0.weight, &r.aem.0.bias, &r.aem.1.weight, &r.aem.1.bias);

    let g = Graph::new();
    let m = ModalFeatures::new(&g, 4, g.input(fr), g.input(fa)).unwrap();
    let p = bind(&g, &r);
    let full = adaptive_fusion_bank(&g, &m, &p, &BankMode::full()).unwrap();
    assert!(g.value(full.fb).max_abs_diff(&fb_want) < 1e-12);
    assert_eq!(full.weights.unwrap().per_scheme_mean.len(), 5);

    let plain = adaptive_fusion_bank(&g, &m, &p, &BankMode::no_aem()).unwrap();
    assert!(plain.weights.is_none());
    assert_eq!(*g.value(plain.fb), *g.value(plain.schemes.unwrap().f_cat));
    assert!(g.value(plain.fb).max_abs_diff(&fc) < 1e-12);
}

#[test]
fn subset_bank_width_and_zero_scheme() {
    let g = Graph::new();
    let (fr, fa) = inputs(112, &[1, C, 4, 4]);
    let m = ModalFeatures::new(&g, 2, g.input(fr), g.input(fa)).unwrap();
    let zero = BankParams {
        cb: Some(ConvParams::zeros(C, 2 * C, 3, ConvGeometry::same3(1)).bind(&g, false)),
        ..BankParams::default()
    };
    let only_cb = BankMode::new(&[Scheme::Cb], false).unwrap();
    let out = adaptive_fusion_bank(&g, &m, &zero, &only_cb).unwrap();
    assert!(g.value(out.fb).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let r = raw(C, 2, &mut rng);
    let pair = BankMode::subset(&[Scheme::Td, Scheme::Li]).unwrap();
    let out = adaptive_fusion_bank(&g, &m, &bind(&g, &r), &pair).unwrap();
    assert_eq!(g.shape(out.fb), vec![1, 2 * C, 4, 4]);
    assert_eq!(out.schemes.unwrap().schemes(), vec![Scheme::Li, Scheme::Td]);

    assert!(matches!(BankMode::subset(&[]), Err(Error::Config(_))));
}

#[test]
fn gradcheck_through_whole_bank() {
    let c = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let r = raw(c, 5, &mut rng);
    let (fr, fa) = inputs(115, &[1, c, 5, 5]);
    let probe = rand_tensor(&[1, 5 * c, 5, 5], &mut rng);
    let leaves = vec![
        fr,
        fa,
        r.cb.weight.clone(),
        r.sv.weight.clone(),
        r.ic.0.weight.clone(),
        r.ic.1.weight.clone(),
        r.li.weight.clone(),
        r.td.weight.clone(),
        r.aem.0.weight.clone(),
        r.aem.1.weight.clone(),
        r.aem.1.bias.clone(),
    ];
    let err = gradcheck(
        |g, v| {
            let m = ModalFeatures::new(g, 2, v[0], v[1])?;
            let mut p = bind(g, &r);
            p.cb.as_mut().unwrap().weight = v[2];
            p.sv.as_mut().unwrap().weight = v[3];
            p.ic.as_mut().unwrap().0.weight = v[4];
            p.ic.as_mut().unwrap().1.weight = v[5];
            p.li.as_mut().unwrap().weight = v[6];
            p.td.as_mut().unwrap().weight = v[7];
            p.aem.as_mut().unwrap().0.weight = v[8];
            p.aem.as_mut().unwrap().1.weight = v[9];
            p.aem.as_mut().unwrap().1.bias = v[10];
            let out = adaptive_fusion_bank(g, &m, &p, &BankMode::full())?;
            Ok(g.sum(g.mul(out.fb, g.input(probe.clone()))?))
        },
        &leaves,
    )
    .unwrap();
    assert!(err < 1e-3, "{}", err);
}
