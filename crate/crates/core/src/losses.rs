//! Loss terms and their weighted combination, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_v: 1.0,
            lambda_l: 1000.0,
        }
    }
}

/// The four loss components: video, texture TV, silhouette, Laplacian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub video: f64,
    pub tv: f64,
    pub silhouette: f64,
    pub laplacian: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.video.is_finite()
            && self.tv.is_finite()
            && self.silhouette.is_finite()
            && self.laplacian.is_finite()
    }
}

/// `lambda_V * L_V + L_T + L_S + lambda_L * L_L`.
pub fn joint_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::NonFinite(format!("loss components {c:?}")));
    }
    Ok(w.lambda_v * c.video + c.tv + c.silhouette + w.lambda_l * c.laplacian)
}

fn check_pairs(a: &[Image], b: &[Image], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} vs {} images",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: no images")));
    }
    for (x, y) in a.iter().zip(b) {
        x.ensure_same_shape(y, what)?;
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels of one image pair.
pub fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data.len() as f64
}

/// Per-frame mean L1, averaged over frames.
pub fn video_loss(rendered: &[Image], observed: &[Image]) -> Result<f64> {
    Ok(video_loss_per_frame(rendered, observed)?
        .iter()
        .sum::<f64>()
        / rendered.len() as f64)
}

pub fn video_loss_per_frame(rendered: &[Image], observed: &[Image]) -> Result<Vec<f64>> {
    check_pairs(rendered, observed, "video loss")?;
    Ok(rendered
        .iter()
        .zip(observed)
        .map(|(r, o)| mean_abs_diff(r, o))
        .collect())
}

/// Loss and its gradient with respect to each rendered frame.
pub fn video_loss_grad(rendered: &[Image], observed: &[Image]) -> Result<(f64, Vec<Image>)> {
    check_pairs(rendered, observed, "video loss")?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, o) in rendered.iter().zip(observed) {
        let scale = 1.0 / (r.data.len() * rendered.len()) as f64;
        let mut g = Image::new(r.width, r.height, r.channels);
        for ((gi, x), y) in g.data.iter_mut().zip(&r.data).zip(&o.data) {
            let d = x - y;
            total += d.abs() * scale;
            *gi = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// `sum min(M, S) / sum max(M, S)`; an empty union counts as a perfect match.
pub fn soft_iou(mask: &Image, silhouette: &Image) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (m, s) in mask.data.iter().zip(&silhouette.data) {
        inter += m.min(*s);
        union += m.max(*s);
    }
    if union > 0.0 {
        inter / union
    } else {
        1.0
    }
}

/// `1 - mean soft IoU` over paired masks and silhouettes.
pub fn silhouette_loss(masks: &[Image], silhouettes: &[Image]) -> Result<f64> {
    check_pairs(masks, silhouettes, "silhouette loss")?;
    let mean = masks
        .iter()
        .zip(silhouettes)
        .map(|(m, s)| soft_iou(m, s))
        .sum::<f64>()
        / masks.len() as f64;
    Ok(1.0 - mean)
}

/// Loss and its gradient with respect to each silhouette. At ties
/// `M == S` the subgradient splits evenly between `min` and `max`.
pub fn silhouette_loss_grad(masks: &[Image], silhouettes: &[Image]) -> Result<(f64, Vec<Image>)> {
    check_pairs(masks, silhouettes, "silhouette loss")?;
    let count = masks.len() as f64;
    let mut mean_iou = 0.0;
    let mut grads = Vec::with_capacity(masks.len());
    for (m, s) in masks.iter().zip(silhouettes) {
        let (mut inter, mut union) = (0.0, 0.0);
        for (a, b) in m.data.iter().zip(&s.data) {
            inter += a.min(*b);
            union += a.max(*b);
        }
        let mut g = Image::new(s.width, s.height, s.channels);
        if union > 0.0 {
            mean_iou += inter / union / count;
            let (gi, gu) = (1.0 / union, -inter / (union * union));
            for ((out, a), b) in g.data.iter_mut().zip(&m.data).zip(&s.data) {
                let (d_inter, d_union) = if b < a {
                    (1.0, 0.0)
                } else if b > a {
                    (0.0, 1.0)
                } else {
                    (0.5, 0.5)
                };
                *out = -(d_inter * gi + d_union * gu) / count;
            }
        } else {
            mean_iou += 1.0 / count;
        }
        grads.push(g);
    }
    Ok((1.0 - mean_iou, grads))
}

/// Anisotropic total variation: `(sum |dx| + sum |dy|) / (W * H * C)`.
pub fn tv_loss(texture: &Image) -> f64 {
    tv_impl(texture, None)
}

/// TV loss, accumulating its gradient (same layout as the texture data).
pub fn tv_loss_grad(texture: &Image, grad: &mut [f64]) -> f64 {
    tv_impl(texture, Some(grad))
}

fn tv_impl(t: &Image, mut grad: Option<&mut [f64]>) -> f64 {
    let scale = 1.0 / t.data.len() as f64;
    let mut total = 0.0;
    let mut add = |i: usize, j: usize, grad: &mut Option<&mut [f64]>| {
        let d = t.data[j] - t.data[i];
        total += d.abs();
        if let Some(g) = grad.as_deref_mut() {
            let s = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
            g[j] += s;
            g[i] -= s;
        }
    };
    for y in 0..t.height {
        for x in 0..t.width {
            for c in 0..t.channels {
                let i = t.index(x, y, c);
                if x + 1 < t.width {
                    add(i, t.index(x + 1, y, c), &mut grad);
                }
                if y + 1 < t.height {
                    add(i, t.index(x, y + 1, c), &mut grad);
                }
            }
        }
    }
    total * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.gen::<f64>())
    }

    fn square(w: usize, x0: usize, y0: usize, side: usize) -> Image {
        Image::from_fn(w, w, 1, |x, y, _| {
            if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn video_loss_examples() {
        let a = Image::filled(4, 3, 3, 0.2);
        assert_eq!(video_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = Image::filled(4, 3, 3, 0.7);
        assert!((video_loss(&[a.clone(), a], &[b.clone(), b]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn video_loss_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 7, 5, 3)).collect();
        let o: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 7, 5, 3)).collect();
        let mut oracle = 0.0;
        for n in 0..3 {
            let mut s = 0.0;
            for y in 0..5 {
                for x in 0..7 {
                    for c in 0..3 {
                        s += (r[n].get(x, y, c) - o[n].get(x, y, c)).abs();
                    }
                }
            }
            oracle += s / 105.0 / 3.0;
        }
        assert!((video_loss(&r, &o).unwrap() - oracle).abs() < 1e-9);
        let (l, _) = video_loss_grad(&r, &o).unwrap();
        assert!((l - oracle).abs() < 1e-9);
    }

    #[test]
    fn video_loss_rejects_mismatched_shapes() {
        let a = Image::new(4, 4, 3);
        let b = Image::new(4, 5, 3);
        assert!(matches!(
            video_loss(&[a.clone()], &[b]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(video_loss(&[a.clone()], &[a.clone(), a]).is_err());
    }

    #[test]
    fn silhouette_loss_examples() {
        let sq = square(30, 5, 5, 10);
        assert_eq!(silhouette_loss(&[sq.clone()], &[sq.clone()]).unwrap(), 0.0);
        let far = square(30, 18, 18, 10);
        assert_eq!(silhouette_loss(&[sq.clone()], &[far]).unwrap(), 1.0);
        let shifted = square(30, 10, 5, 10);
        assert!((silhouette_loss(&[sq], &[shifted]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_union_is_a_perfect_match() {
        let z = Image::new(8, 8, 1);
        assert_eq!(silhouette_loss(&[z.clone()], &[z.clone()]).unwrap(), 0.0);
        let (l, g) = silhouette_loss_grad(&[z.clone()], &[z]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn silhouette_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let masks: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 6, 6, 1)).collect();
        let sils: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 6, 6, 1)).collect();
        let (_, grads) = silhouette_loss_grad(&masks, &sils).unwrap();
        let h = 1e-7;
        for k in 0..3 {
            for i in [0usize, 7, 20, 35] {
                let mut p = sils.clone();
                p[k].data[i] += h;
                let mut q = sils.clone();
                q[k].data[i] -= h;
                let fd = (silhouette_loss(&masks, &p).unwrap()
                    - silhouette_loss(&masks, &q).unwrap())
                    / (2.0 * h);
                assert!((fd - grads[k].data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&Image::filled(9, 7, 3, 0.4)), 0.0);
        // vertical step edge of height 1 between columns 3 and 4
        let (w, h) = (8, 5);
        let step = Image::from_fn(w, h, 3, |x, _, _| if x >= 4 { 1.0 } else { 0.0 });
        let mut direct = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                for c in 0..3 {
                    direct += (step.get(x + 1, y, c) - step.get(x, y, c)).abs();
                }
            }
        }
        assert_eq!(direct, (h * 3) as f64);
        assert!((tv_loss(&step) - direct / (w * h * 3) as f64).abs() < 1e-15);
        let checker = Image::from_fn(6, 6, 3, |x, y, _| ((x + y) % 2) as f64);
        assert!(tv_loss(&checker) > 0.0);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_image(&mut rng, 5, 4, 3);
        let mut g = vec![0.0; t.data.len()];
        tv_loss_grad(&t, &mut g);
        let h = 1e-7;
        for i in 0..t.data.len() {
            let mut p = t.clone();
            p.data[i] += h;
            let mut q = t.clone();
            q.data[i] -= h;
            let fd = (tv_loss(&p) - tv_loss(&q)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_loss_examples() {
        let w = LossWeights::default();
        let c = LossComponents {
            video: 0.1,
            tv: 0.02,
            silhouette: 0.3,
            laplacian: 0.0001,
        };
        assert!((joint_loss(&c, &w).unwrap() - 0.52).abs() < 1e-12);
        assert_eq!(joint_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let pre = LossWeights { lambda_v: 0.0, ..w };
        let other = LossComponents { video: 7.0, ..c };
        assert_eq!(
            joint_loss(&c, &pre).unwrap(),
            joint_loss(&other, &pre).unwrap()
        );
        let bad = LossComponents {
            video: f64::NAN,
            ..c
        };
        assert!(matches!(joint_loss(&bad, &w), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn video_loss_is_a_metric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = vec![random_image(&mut rng, 4, 4, 3)];
            let b = vec![random_image(&mut rng, 4, 4, 3)];
            let c = vec![random_image(&mut rng, 4, 4, 3)];
            let d = |x: &[Image], y: &[Image]| video_loss(x, y).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &b) > 0.0);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn silhouette_loss_bounded_and_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 5, 5, 1)).collect();
            let sils: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 5, 5, 1)).collect();
            let l = silhouette_loss(&masks, &sils).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            let perm = [2usize, 0, 3, 1];
            let pm: Vec<Image> = perm.iter().map(|&i| masks[i].clone()).collect();
            let ps: Vec<Image> = perm.iter().map(|&i| sils[i].clone()).collect();
            prop_assert!((silhouette_loss(&pm, &ps).unwrap() - l).abs() < 1e-12);
        }

        #[test]
        fn joint_loss_is_linear_in_each_component(v in 0.0f64..2.0, t in 0.0f64..2.0, k in 0.0f64..3.0) {
            let w = LossWeights::default();
            let base = LossComponents { video: v, tv: t, silhouette: 0.3, laplacian: 1e-4 };
            let scaled = LossComponents { video: v * k, ..base };
            let zero = LossComponents { video: 0.0, ..base };
            let j = |c: &LossComponents| joint_loss(c, &w).unwrap();
            prop_assert!((j(&scaled) - j(&zero) - k * (j(&base) - j(&zero))).abs() < 1e-9);
        }
    }
}
