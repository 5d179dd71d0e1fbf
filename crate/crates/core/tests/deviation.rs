use geocalc::deviation::{
    act_diffeo, decompose, recompose, xi_transform, Background, DeviationField, GeneratorField, XiDecomposition,
};
use geocalc::field::FourierField;
use geocalc::immersion::Immersion;
use nalgebra::DMatrix;

fn sampled(bg: &Background, f: &FourierField, scale: f64) -> Vec<Vec<f64>> {
    bg.grid().points().iter().map(|x| f.value(x).iter().map(|c| c * scale).collect()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norms(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

#[test]
fn rotating_the_normal_frame_rotates_only_normal_components() {
    let imm = Immersion::circle3(1.3, 96).unwrap();
    let plain = Background::new(imm.clone()).unwrap();
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let turned = Background::with_frame_rotation(imm, &rot).unwrap();
    assert_eq!(plain.codim(), 2);

    let per = [std::f64::consts::TAU];
    let f = FourierField::random(1, 3, &per, 2, 0.3, 5);
    let dev = DeviationField::new(&plain, sampled(&plain, &f, 0.1)).unwrap();
    let a = decompose(&plain, &dev).unwrap();
    let b = decompose(&turned, &dev).unwrap();

    assert!(max_diff(&a.tangential, &b.tangential) < 1e-14);
    let (na, nb) = (norms(&a.normal), norms(&b.normal));
    assert!(na.iter().zip(&nb).all(|(x, y)| (x - y).abs() < 1e-13));
    assert!(max_diff(&a.normal, &b.normal) > 1e-3, "rotation should be visible in the components");
    assert!(max_diff(&recompose(&plain, &a).samples, &recompose(&turned, &b).samples) < 1e-13);
}

/// ξ transformed directly against decompose ∘ act ∘ recompose.
fn composition_gap(bg: &Background, eps: f64) -> (f64, f64) {
    let per = [std::f64::consts::TAU];
    let ft = FourierField::random(1, 1, &per, 2, 0.3, 41);
    let fn_ = FourierField::random(1, bg.codim(), &per, 2, 0.3, 42);
    let fe = FourierField::random(1, 1, &per, 2, 0.3, 43);
    let xi = XiDecomposition::from_upper(bg, sampled(bg, &ft, eps), sampled(bg, &fn_, eps)).unwrap();
    let eta = GeneratorField::from_fourier(bg, &fe, eps).unwrap();
    let direct = xi_transform(bg, &xi, &eta, 3, 2).unwrap().xi;
    let moved = act_diffeo(bg, &recompose(bg, &xi), &eta, 3).unwrap().field;
    let via = decompose(bg, &moved).unwrap();
    (max_diff(&direct.tangential, &via.tangential), max_diff(&direct.normal, &via.normal))
}

#[test]
fn transformation_law_matches_the_ambient_action() {
    let bg = Background::new(Immersion::circle(1.0, 128).unwrap()).unwrap();
    let gaps: Vec<(f64, f64)> = [0.04, 0.02, 0.01].iter().map(|&e| composition_gap(&bg, e)).collect();
    for (t, _) in &gaps {
        assert!(*t < 1e-8, "tangential gap {t:e}");
    }
    // normal components differ by the truncation, at least cubic
    for w in gaps.windows(2) {
        let ratio = w[0].1 / w[1].1;
        assert!(ratio > 6.0, "normal gaps {:?}", gaps);
    }
    assert!(gaps[0].1 < 1e-3);
}
