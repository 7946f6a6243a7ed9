use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uvpaint::conditioning::{downsample_mask, masked_texture};
use uvpaint::diffusion::{standard_normal, NoiseSchedule};
use uvpaint::geometry::{normalize_mesh, Face, Mesh};
use uvpaint::image::{ImageGrid, Semantics};
use uvpaint::metrics::color_distance;
use uvpaint::raster::bake_position_map;
use uvpaint::sampler::timestep_ladder;
use uvpaint::synth::{TypeLabel, UV_FILL};
use uvpaint::type_select::pos_emb_index;

/// Unit uv square split along its diagonal, with positions an affine
/// function of uv.
fn affine_quad(lin: [[f64; 2]; 3], offset: [f64; 3]) -> Mesh {
    let uvs = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let positions = uvs
        .iter()
        .map(|uv: &[f32; 2]| [0, 1, 2].map(|d| (lin[d][0] * uv[0] as f64 + lin[d][1] * uv[1] as f64 + offset[d]) as f32))
        .collect();
    let faces = vec![Face { pos: [0, 1, 2], uv: [0, 1, 2] }, Face { pos: [0, 2, 3], uv: [0, 2, 3] }];
    Mesh::new(positions, uvs, faces).unwrap()
}

fn random_mask(h: usize, w: usize, bits: &[bool]) -> ImageGrid {
    let data = (0..h * w).map(|i| if bits[i % bits.len()] { 1.0 } else { 0.0 }).collect();
    ImageGrid::new(h, w, Semantics::Mask, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalised_mesh_fills_the_unit_box(
        pts in prop::collection::vec(prop::array::uniform3(-50.0f32..50.0), 3..20),
        shift in prop::array::uniform3(-10.0f32..10.0),
        scale in 0.1f32..20.0,
    ) {
        let n = pts.len() as u32;
        let faces = (0..n - 2).map(|i| Face { pos: [0, i + 1, i + 2], uv: [0, 0, 0] }).collect();
        let mesh = Mesh { positions: pts.clone(), uvs: vec![[0.0, 0.0]], faces };
        let Ok((a, _)) = normalize_mesh(&mesh, None) else { return Ok(()) };
        let extent = a.positions.iter().flatten().fold(0.0f32, |m, v| m.max(v.abs()));
        prop_assert!((extent - 1.0).abs() < 1e-4, "extent {extent}");
        for d in 0..3 {
            let lo = a.positions.iter().map(|p| p[d]).fold(f32::INFINITY, f32::min);
            let hi = a.positions.iter().map(|p| p[d]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!((lo + hi).abs() < 1e-4);
        }
        // Invariant under a similarity transform of the input.
        let moved = Mesh { positions: pts.iter().map(|p| [0, 1, 2].map(|d| p[d] * scale + shift[d])).collect(), ..mesh };
        let (b, _) = normalize_mesh(&moved, None).unwrap();
        for (p, q) in a.positions.iter().zip(&b.positions) {
            for d in 0..3 {
                prop_assert!((p[d] - q[d]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn baked_affine_quad_matches_closed_form(
        lin in prop::array::uniform3(prop::array::uniform2(-0.45f64..0.45)),
        offset in prop::array::uniform3(-0.09f64..0.09),
        res in 4usize..40,
    ) {
        let (pos, mask) = bake_position_map(&affine_quad(lin, offset), res).unwrap();
        prop_assert!(mask.data.iter().all(|&m| m == 1.0));
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                for d in 0..3 {
                    let want = lin[d][0] * u + lin[d][1] * v + offset[d];
                    prop_assert!((pos.pixel(x, y)[d] as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn class_encoding_lies_on_unit_circles(index in 0usize..3, n in 1usize..16) {
        let e = pos_emb_index(index, n);
        prop_assert_eq!(e.len(), 2 * n);
        for pair in e.chunks(2) {
            prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-5);
        }
        prop_assert_eq!(&e[..2], &[(index as f32).sin(), (index as f32).cos()][..]);
    }

    #[test]
    fn colour_distance_is_a_bounded_metric(
        a in prop::array::uniform3(0.0f32..=1.0),
        b in prop::array::uniform3(0.0f32..=1.0),
        c in prop::array::uniform3(0.0f32..=1.0),
    ) {
        let (ab, ba) = (color_distance(&a, &b), color_distance(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&ab));
        prop_assert!(color_distance(&a, &a) == 0.0);
        prop_assert!(ab <= color_distance(&a, &c) + color_distance(&c, &b) + 1e-9);
    }

    #[test]
    fn masked_texture_keeps_known_texels_and_fills_the_rest(
        h in 1usize..12,
        w in 1usize..12,
        bits in prop::collection::vec(any::<bool>(), 1..64),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = standard_normal(&mut rng, (1, h, w * 3));
        let tex = ImageGrid::new(h, w, Semantics::Rgb, noise.data.iter().map(|v| v.abs().fract()).collect()).unwrap();
        let mask = random_mask(h, w, &bits);
        let out = masked_texture(&tex, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                let want = if mask.pixel(x, y)[0] == 1.0 { &UV_FILL[..] } else { tex.pixel(x, y) };
                prop_assert_eq!(out.pixel(x, y), want);
            }
        }
        prop_assert_eq!(masked_texture(&out, &mask).unwrap(), out);
    }

    #[test]
    fn downsampled_mask_is_binary_and_reads_block_centres(
        blocks in 1usize..6,
        factor in 1usize..9,
        bits in prop::collection::vec(any::<bool>(), 1..97),
    ) {
        let n = blocks * factor;
        let mask = random_mask(n, n, &bits);
        let t = downsample_mask(&mask, factor).unwrap();
        prop_assert_eq!((t.c, t.h, t.w), (1, blocks, blocks));
        for by in 0..blocks {
            for bx in 0..blocks {
                let centre = mask.pixel(bx * factor + factor / 2, by * factor + factor / 2)[0];
                prop_assert_eq!(t.data[by * blocks + bx], centre);
            }
        }
    }

    #[test]
    fn forward_noising_is_the_closed_form_mixture(t in 1usize..=1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = standard_normal(&mut rng, (2, 3, 5));
        let eps = standard_normal(&mut rng, (2, 3, 5));
        let ab: f64 = (1..=t).map(|k| 1.0 - (1e-4 + (0.02 - 1e-4) * (k - 1) as f64 / 999.0)).product();
        prop_assert!((s.alpha_bar[t] - ab).abs() < 1e-9);
        let xt = s.add_noise(&x0, &eps, t).unwrap();
        for ((x, a), e) in xt.data.iter().zip(&x0.data).zip(&eps.data) {
            let want = ab.sqrt() * *a as f64 + (1.0 - ab).sqrt() * *e as f64;
            prop_assert!((*x as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn ladder_descends_from_t_to_zero(steps in 1usize..=1000) {
        let l = timestep_ladder(1000, steps);
        prop_assert_eq!(l.len(), steps + 1);
        prop_assert_eq!((l[0], l[steps]), (1000, 0));
        prop_assert!(l.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn one_hot_round_trips(i in 0usize..3) {
        let label = TypeLabel::from_index(i).unwrap();
        prop_assert_eq!(TypeLabel::from_one_hot(&label.one_hot()).unwrap(), label);
        prop_assert_eq!(label.one_hot().iter().sum::<f32>(), 1.0);
    }
}
