use lens_core::seg_head::{aggregate_text_to_image, head_forward, layer_forward, HeadInput, HeadParameters};
use lens_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(grid: (usize, usize), text: usize, d: usize, seed: u64) -> HeadInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HeadInput::new(
        Tensor::randn(&[grid.0 * grid.1, d], 1.0, &mut rng),
        Tensor::randn(&[text, d], 1.0, &mut rng),
        grid,
    )
    .unwrap()
}

#[test]
fn both_layers_are_causal_row_stochastic() {
    let params = HeadParameters::new(16, 4, 3).unwrap();
    let x = input((4, 5), 3, 16, 1).stacked();
    for layer in [1, 2] {
        let (a, h) = layer_forward(&params, layer, &x).unwrap();
        assert_eq!(h.dims(), x.dims());
        for i in 0..a.rows() {
            let row = a.row(i);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
    assert!(layer_forward(&params, 3, &x).is_err());
}

#[test]
fn prefix_outputs_ignore_later_tokens() {
    let params = HeadParameters::new(8, 2, 4).unwrap();
    let x = input((3, 3), 2, 8, 2).stacked();
    let mut y = x.clone();
    let last = y.rows() - 1;
    for v in &mut y.data_mut()[last * 8..] {
        *v += 5.0;
    }
    let (_, hx) = layer_forward(&params, 1, &x).unwrap();
    let (_, hy) = layer_forward(&params, 1, &y).unwrap();
    assert_eq!(hx.data()[..last * 8], hy.data()[..last * 8]);
}

#[test]
fn aggregate_matches_explicit_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (li, lt, grid) = (12, 3, (3, 4));
    let a = Tensor::randn(&[li + lt, li + lt], 1.0, &mut rng);
    let agg = aggregate_text_to_image(&a, li, lt, grid).unwrap();
    for j in 0..li {
        let mut s = 0.0;
        for t in 0..lt {
            s += a.at(li + t, j);
        }
        let expect = s / lt as f64;
        assert!((agg.data()[j] - expect).abs() < 1e-12);
    }
    assert_eq!(agg.dims(), &[3, 4]);
    assert!(aggregate_text_to_image(&a, li, lt, (4, 4)).is_err());
}

#[test]
fn grounding_is_layer_one_text_to_image_attention() {
    let params = HeadParameters::new(8, 2, 6).unwrap();
    let inp = input((3, 3), 2, 8, 7);
    let out = head_forward(&params, &inp).unwrap();
    let (a1, _) = layer_forward(&params, 1, &inp.stacked()).unwrap();
    let expect = aggregate_text_to_image(&a1, 9, 2, (3, 3)).unwrap();
    assert_eq!(out.grounding, expect);
    assert!(out.grounding.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(out.start_feature.data(), out.enhanced.row(10));
}

#[test]
fn zero_update_head_is_identity() {
    let params = HeadParameters::zero_update(8, 2, 1).unwrap();
    let inp = input((2, 3), 2, 8, 9);
    let out = head_forward(&params, &inp).unwrap();
    assert_eq!(out.enhanced, inp.stacked());
}
