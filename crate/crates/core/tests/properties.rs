use chromashift_core::data::{synthesize_degraded, synthetic_scene, DegradationSpec};
use chromashift_core::graph::Graph;
use chromashift_core::illumination::{brighten, darken, IlluminationMap, DEFAULT_FLOOR};
use chromashift_core::imaging::{invert, srgb_pixel_to_lab, ImageTensor};
use chromashift_core::losses::{cosine_graph, l1_graph, ssim_loss_graph, PerceptualExtractor};
use chromashift_core::metrics::{psnr, rmse_lab, ssim};
use chromashift_core::params::ParamStore;
use chromashift_core::tensor::Tensor;
use proptest::prelude::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |v| ImageTensor::new(h, w, v).unwrap())
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invert_twice_is_identity(img in image(8, 9)) {
        prop_assert_eq!(invert(&invert(&img)), img);
    }

    #[test]
    fn grey_has_no_chroma(v in 0.0f64..=1.0) {
        let lab = srgb_pixel_to_lab([v; 3]);
        prop_assert!(lab[1].abs() <= 0.01 && lab[2].abs() <= 0.01, "{:?}", lab);
    }

    #[test]
    fn brighten_and_darken_are_monotone_and_dual(x in pixels(3 * 20), l in prop::collection::vec(DEFAULT_FLOOR..=1.0, 20)) {
        let img = Tensor::from_vec([1, 3, 4, 5], x).unwrap();
        let lum = IlluminationMap::new(Tensor::from_vec([1, 1, 4, 5], l).unwrap(), DEFAULT_FLOOR).unwrap();
        let b = brighten(&img, &lum);
        let d = darken(&img, &lum);
        for ((&v, &up), &down) in img.data().iter().zip(b.tensor().data()).zip(d.tensor().data()) {
            prop_assert!(up >= v && down <= v);
            prop_assert!(up.is_finite() && down.is_finite());
        }
        let dual = brighten(&img.map(|v| 1.0 - v), &lum).0.map(|v| 1.0 - v);
        prop_assert!(dual.max_abs_diff(d.tensor()) <= 1e-6);
    }

    #[test]
    fn metrics_are_symmetric(a in image(12, 12), b in image(12, 12)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((rmse_lab(&a, &b).unwrap() - rmse_lab(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rmse_lab_triangle_inequality(a in image(8, 8), b in image(8, 8), c in image(8, 8)) {
        let ab = rmse_lab(&a, &b).unwrap();
        let bc = rmse_lab(&b, &c).unwrap();
        let ac = rmse_lab(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9, "{} > {} + {}", ac, ab, bc);
    }

    #[test]
    fn losses_are_non_negative_and_vanish_at_the_target(p in pixels(3 * 144), q in pixels(3 * 144)) {
        let params = ParamStore::<f64>::new();
        let vgg = PerceptualExtractor::<f64>::fallback(1);
        let a = Tensor::from_vec([1, 3, 12, 12], p).unwrap();
        let b = Tensor::from_vec([1, 3, 12, 12], q).unwrap();
        for (x, y, same) in [(&a, &b, false), (&a, &a, true)] {
            let mut g = Graph::new(&params);
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let terms = [
                l1_graph(&mut g, xv, yv).unwrap(),
                cosine_graph(&mut g, xv, yv).unwrap(),
                ssim_loss_graph(&mut g, xv, yv).unwrap(),
                vgg.loss_graph(&mut g, xv, yv).unwrap(),
            ];
            for t in terms {
                let v = g.value(t).data()[0];
                prop_assert!(v >= 0.0, "{}", v);
                if same {
                    prop_assert!(v.abs() < 1e-12, "{}", v);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn degraded_regions_move_away_from_the_reference(scene in any::<u64>(), seed in any::<u64>()) {
        let gt = synthetic_scene(32, 32, scene).unwrap();
        let d = synthesize_degraded(&gt, &DegradationSpec { seed, ..Default::default() }).unwrap();
        let again = synthesize_degraded(&gt, &DegradationSpec { seed, ..Default::default() }).unwrap();
        prop_assert_eq!(&d, &again);
        let mean = |img: &ImageTensor, on: &[bool]| {
            let hw = on.len();
            let (mut s, mut n) = (0.0, 0usize);
            for c in 0..3 {
                for (p, _) in on.iter().enumerate().filter(|(_, &m)| m) {
                    s += img.data()[c * hw + p] as f64;
                    n += 1;
                }
            }
            s / n as f64
        };
        prop_assert!(mean(&d.input, d.over.data()) > mean(&gt, d.over.data()));
        prop_assert!(mean(&d.input, d.under.data()) < mean(&gt, d.under.data()));
    }
}
