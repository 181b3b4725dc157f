mod common;

use polyforge_core::autograd::Padding;
use polyforge_core::denoiser::{build_denoiser, forward_tensor, AttentionFlags, DenoiserConfig};
use polyforge_core::diffusion::PredictionKind;
use polyforge_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count from the architecture description alone: walk the
/// channel widths through encoder, middle and decoder.
fn count_oracle(cfg: &DenoiserConfig) -> usize {
    let te = cfg.time_embed_dim;
    let w: Vec<usize> = cfg
        .channel_multipliers
        .iter()
        .map(|m| m * cfg.base_width)
        .collect();
    let gn = |c: usize| 2 * c;
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let res = |cin: usize, cout: usize| {
        gn(cin)
            + conv(cin, cout, 3)
            + (te * cout + cout)
            + gn(cout)
            + conv(cout, cout, 3)
            + if cin != cout { conv(cin, cout, 1) } else { 0 }
    };
    let attn = |c: usize| gn(c) + 4 * conv(c, c, 1);

    let mut n = 2 * (te * te + te) + conv(cfg.in_channels, w[0], 3);
    let mut ch = w[0];
    for &wl in &w {
        for _ in 0..cfg.layers_per_block {
            n += res(ch, wl);
            ch = wl;
        }
    }
    if cfg.attention.encoder_last {
        n += attn(w[2]);
    }
    n += 2 * res(ch, ch);
    if cfg.attention.middle {
        n += attn(ch);
    }
    for level in (0..3).rev() {
        // The first decoder layer sees the upsampled features concatenated
        // with the matching skip.
        n += res(ch + w[level], w[level]);
        n += (cfg.layers_per_block - 1) * res(w[level], w[level]);
        ch = w[level];
    }
    if cfg.attention.decoder_first {
        n += attn(w[2]);
    }
    n + gn(w[0]) + conv(w[0], cfg.in_channels, 3)
}

fn cfg(base: usize, mult: [usize; 3], layers: usize, attention: AttentionFlags) -> DenoiserConfig {
    DenoiserConfig {
        in_channels: 2,
        base_width: base,
        channel_multipliers: mult,
        layers_per_block: layers,
        attention,
        time_embed_dim: 16,
        padding: Padding::Zeros,
    }
}

#[test]
fn parameter_count_matches_shape_walk() {
    for c in [
        cfg(8, [1, 2, 4], 3, AttentionFlags::default()),
        cfg(8, [1, 2, 4], 3, AttentionFlags::none()),
        cfg(4, [1, 1, 1], 1, AttentionFlags::default()),
        cfg(
            16,
            [1, 2, 2],
            2,
            AttentionFlags {
                encoder_last: false,
                middle: true,
                decoder_first: false,
            },
        ),
    ] {
        let p = build_denoiser(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.total_count(), count_oracle(&c), "{c:?}");
    }
}

#[test]
fn parameter_count_by_hand_for_the_smallest_net() {
    // base 1, all multipliers 1, one layer, no attention, in 1, te 2:
    // time 2*(4+2)=12, conv_in 9+1=10, each res layer 2+10+3+2+10=27 with
    // 3 encoder + 2 middle layers = 135, decoder layers see 2 channels:
    // 4+19+3+2+10+3 = 41 each, 123 total, out 2 + 10 = 12.
    let c = DenoiserConfig {
        in_channels: 1,
        base_width: 1,
        channel_multipliers: [1, 1, 1],
        layers_per_block: 1,
        attention: AttentionFlags::none(),
        time_embed_dim: 2,
        padding: Padding::Zeros,
    };
    let p = build_denoiser(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.total_count(), 12 + 10 + 135 + 123 + 12);
}

#[test]
fn disabled_attention_has_no_attention_parameters() {
    let p = build_denoiser(
        &cfg(8, [1, 2, 4], 1, AttentionFlags::none()),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert!(p.params.tensors().iter().all(|t| !t.name.contains("attn")));
}

#[test]
fn fully_convolutional_over_resolutions() {
    let c = cfg(4, [1, 2, 2], 1, AttentionFlags::default());
    let p = build_denoiser(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for res in [32, 40] {
        let y = forward_tensor(&p, &Tensor::zeros(&[2, res, res]), 7).unwrap();
        assert_eq!(y.shape(), &[2, res, res]);
    }
    let y = forward_tensor(&p, &Tensor::zeros(&[2, 16, 24]), 7).unwrap();
    assert_eq!(y.shape(), &[2, 16, 24]);
    let err = forward_tensor(&p, &Tensor::zeros(&[2, 36, 36]), 7).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(forward_tensor(&p, &Tensor::zeros(&[3, 32, 32]), 7).is_err());
}

#[test]
fn gradient_matches_finite_differences() {
    let c = cfg(4, [1, 2, 2], 1, AttentionFlags::default());
    let p = build_denoiser(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let layer_types = [
        "time.lin1",
        "time.lin2",
        "conv_in",
        "norm1",
        "conv1",
        ".time.",
        "norm2",
        "conv2",
        "skip",
        "attn.norm",
        "attn.q",
        "attn.k",
        "attn.v",
        "attn.proj",
        "out.norm",
        "out.conv",
    ];
    for kind in [PredictionKind::Epsilon, PredictionKind::V] {
        let r = common::gradcheck(&p, kind, 8, 50, &layer_types, 11);
        assert!(
            r.max_rel <= 1e-4,
            "{kind:?}: max relative error {:e}",
            r.max_rel
        );
        for pat in layer_types {
            assert!(
                r.covered.iter().any(|n| n.contains(pat)),
                "{pat} not covered"
            );
        }
    }
}

#[test]
fn cyclic_padding_commutes_with_coarse_shifts() {
    let mut c = cfg(4, [1, 2, 2], 1, AttentionFlags::default());
    c.padding = Padding::Cyclic;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = build_denoiser(&c, &mut rng).unwrap();
    for t in p.params.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let n = 16;
    let x = Tensor::from_fn(&[2, n, n], |_| rng.gen_range(-1.0..1.0));
    // A shift by the total downsampling factor stays on the pooling grid.
    let (dy, dx) = (8, 8);
    let shift = |t: &Tensor| {
        let mut out = Tensor::zeros(t.shape());
        for ch in 0..2 {
            for y in 0..n {
                for xx in 0..n {
                    out.set3(ch, (y + dy) % n, (xx + dx) % n, t.at3(ch, y, xx));
                }
            }
        }
        out
    };
    let a = shift(&forward_tensor(&p, &x, 40).unwrap());
    let b = forward_tensor(&p, &shift(&x), 40).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-10, "diff {}", a.max_abs_diff(&b));
}
