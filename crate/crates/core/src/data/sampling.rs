use rand::Rng;

use super::{FrameRef, VideoSample};

/// A source and a target frame drawn from the same video.
#[derive(Debug, Clone, Copy)]
pub struct PairSample<'a> {
    pub video_id: &'a str,
    pub source: FrameRef<'a>,
    pub target: FrameRef<'a>,
}

/// Draw an ordered `(source, target)` pair of distinct frames uniformly at
/// random. A one-frame video yields the same frame twice.
///
/// # Panics
/// On an empty video.
pub fn sample_pair<'a, R: Rng + ?Sized>(video: &'a VideoSample, rng: &mut R) -> PairSample<'a> {
    let n = video.len();
    assert!(n >= 1, "cannot sample a pair from an empty video");
    let (s, t) = if n == 1 {
        (0, 0)
    } else {
        let s = rng.gen_range(0..n);
        // uniform over the n - 1 other indices
        let mut t = rng.gen_range(0..n - 1);
        if t >= s {
            t += 1;
        }
        (s, t)
    };
    PairSample {
        video_id: video.video_id(),
        source: video.frame(s),
        target: video.frame(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::KeypointSet;
    use image::RgbImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(n: usize) -> VideoSample {
        VideoSample::new(
            "v",
            vec![RgbImage::new(2, 2); n],
            vec![KeypointSet::new(vec![[0.0, 0.0]]).unwrap(); n],
            None,
            25.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn single_frame_pairs_with_itself() {
        let v = video(1);
        let p = sample_pair(&v, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((p.source.index, p.target.index), (0, 0));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let v = video(2);
        let a = sample_pair(&v, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_pair(&v, &mut ChaCha8Rng::seed_from_u64(7));
        assert_ne!(a.source.index, a.target.index);
        assert_eq!((a.source.index, a.target.index), (b.source.index, b.target.index));
    }

    #[test]
    fn ordered_pairs_are_uniform() {
        // 20 ordered pairs of a 5-frame video, 10^4 draws: every count within
        // 3 sigma of the binomial mean, and the chi-square statistic below the
        // 99.9% quantile of chi2(19) = 43.82.
        let v = video(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let draws = 10_000usize;
        let mut counts = [[0usize; 5]; 5];
        for _ in 0..draws {
            let p = sample_pair(&v, &mut rng);
            assert!(p.source.index < 5 && p.target.index < 5);
            counts[p.source.index][p.target.index] += 1;
        }
        let p = 1.0 / 20.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (s, row) in counts.iter().enumerate() {
            for (t, &c) in row.iter().enumerate() {
                if s == t {
                    assert_eq!(c, 0);
                    continue;
                }
                assert!((c as f64 - mean).abs() <= 3.0 * sigma, "pair ({s},{t}) count {c}");
                chi2 += (c as f64 - mean).powi(2) / mean;
            }
        }
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }
}
