//! Training-window sampling from token streams.

use rand::Rng;

use crate::error::{Error, Result};

fn check(stream: &[usize], len: usize) -> Result<()> {
    if stream.len() < len {
        return Err(Error::TooShort {
            what: "token stream",
            len: stream.len(),
            min: len,
        });
    }
    Ok(())
}

/// `count` windows of `len` tokens with uniformly random start positions
/// over the concatenation of `streams`; windows never straddle streams.
pub fn random_windows<R: Rng>(rng: &mut R, streams: &[&[usize]], len: usize, count: usize) -> Result<Vec<Vec<usize>>> {
    if streams.is_empty() {
        return Err(Error::Empty("stream list"));
    }
    let mut starts = Vec::with_capacity(streams.len());
    let mut total = 0usize;
    for s in streams {
        check(s, len)?;
        total += s.len() - len + 1;
        starts.push(total);
    }
    Ok((0..count)
        .map(|_| {
            let pick = rng.random_range(0..total);
            let i = starts.partition_point(|&c| c <= pick);
            let offset = pick - if i == 0 { 0 } else { starts[i - 1] };
            streams[i][offset..offset + len].to_vec()
        })
        .collect())
}

/// Deterministic sweep over consecutive non-overlapping windows that wraps
/// around at the end of the stream.
#[derive(Clone, Debug)]
pub struct CyclicWindows {
    len: usize,
    pos: usize,
}

impl CyclicWindows {
    pub fn new(len: usize) -> Self {
        Self { len, pos: 0 }
    }

    pub fn next_batch(&mut self, stream: &[usize], count: usize) -> Result<Vec<Vec<usize>>> {
        check(stream, self.len)?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos + self.len > stream.len() {
                self.pos = 0;
            }
            out.push(stream[self.pos..self.pos + self.len].to_vec());
            self.pos += self.len;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn windows_stay_inside_one_stream() {
        let a: Vec<usize> = (0..10).collect();
        let b: Vec<usize> = (100..105).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for w in random_windows(&mut rng, &[&a, &b], 5, 500).unwrap() {
            assert!(w.windows(2).all(|p| p[1] == p[0] + 1), "{w:?}");
        }
    }

    #[test]
    fn cyclic_wraps() {
        let s: Vec<usize> = (0..7).collect();
        let mut c = CyclicWindows::new(3);
        let got = c.next_batch(&s, 3).unwrap();
        assert_eq!(got, vec![vec![0, 1, 2], vec![3, 4, 5], vec![0, 1, 2]]);
    }

    #[test]
    fn short_stream_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(random_windows(&mut rng, &[&[1, 2]], 3, 1).is_err());
        assert!(CyclicWindows::new(3).next_batch(&[1], 1).is_err());
    }
}
