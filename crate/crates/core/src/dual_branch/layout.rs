use crate::tokenizer::{TokenVocabulary, BOS, EOS, PAD};

/// IPE row numbers (1-based: `1..=L` within-item positions, `L+1` EOS,
/// `L+2` BOS) for an encoder input of `t` items.
pub fn ipe_for_input(t: usize, levels: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..t).flat_map(|_| 1..=levels).collect();
    out.push(levels + 1);
    out
}

/// IPE row numbers for a decoder input `[BOS, c_1..c_L]`.
pub fn ipe_for_target(levels: usize) -> Vec<usize> {
    std::iter::once(levels + 2).chain(1..=levels).collect()
}

/// 0-based IPE table row for each token: a code token's level, `L` for EOS
/// and `L+1` for BOS. PAD and tokens outside the code vocabulary map to
/// row 0; their module output is discarded anyway.
pub fn ipe_rows(tokens: &[u32], vocab: &TokenVocabulary) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| match t {
            EOS => vocab.levels as u32,
            BOS => vocab.levels as u32 + 1,
            _ => vocab.split(t).map_or(0, |(level, _)| level as u32),
        })
        .collect()
}

/// Item index per token. Code tokens are grouped `L` at a time in order;
/// EOS joins the last item (item 0 when there is none) and BOS joins item 0.
/// PAD gets −1.
pub fn item_membership(tokens: &[u32], levels: usize) -> Vec<i64> {
    let codes = tokens.iter().filter(|&&t| t != PAD && t != BOS && t != EOS).count();
    let last = (codes.div_ceil(levels.max(1)) as i64 - 1).max(0);
    let mut seen = 0usize;
    tokens
        .iter()
        .map(|&t| match t {
            PAD => -1,
            BOS => 0,
            EOS => last,
            _ => {
                let m = (seen / levels.max(1)) as i64;
                seen += 1;
                m
            }
        })
        .collect()
}

/// Square additive mask, row-major, entries `0` or `−∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemLocalMask {
    pub len: usize,
    pub data: Vec<f64>,
}

impl ItemLocalMask {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.len + j]
    }
}

/// Same-item tokens see each other (only earlier ones when `causal`);
/// PAD tokens see only themselves and are seen by nobody else.
pub fn item_local_mask(membership: &[i64], causal: bool) -> ItemLocalMask {
    let n = membership.len();
    let mut data = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            let open = if i == j {
                true
            } else {
                membership[i] >= 0 && membership[i] == membership[j] && (!causal || j <= i)
            };
            if open {
                data[i * n + j] = 0.0;
            }
        }
    }
    ItemLocalMask { len: n, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_and_target_patterns() {
        assert_eq!(ipe_for_input(2, 4), vec![1, 2, 3, 4, 1, 2, 3, 4, 5]);
        assert_eq!(ipe_for_input(0, 4), vec![5]);
        assert_eq!(ipe_for_target(4), vec![6, 1, 2, 3, 4]);
        assert_eq!(ipe_for_target(1), vec![3, 1]);
        for t in 0..10 {
            for l in 1..7 {
                assert_eq!(ipe_for_input(t, l).len(), l * t + 1);
                assert_eq!(ipe_for_target(l).len(), l + 1);
            }
        }
    }

    #[test]
    fn rows_follow_token_levels() {
        let v = TokenVocabulary::new(4, 8);
        let mut tokens: Vec<u32> = vec![PAD];
        for _ in 0..2 {
            tokens.extend((0..4).map(|l| v.token(l, 5)));
        }
        tokens.push(EOS);
        let rows = ipe_rows(&tokens, &v);
        let expected: Vec<u32> = ipe_for_input(2, 4).into_iter().map(|r| r as u32 - 1).collect();
        assert_eq!(&rows[1..], expected.as_slice());
        assert_eq!(ipe_rows(&[BOS, v.token(0, 1), v.token(1, 1)], &v), vec![5, 0, 1]);
    }

    #[test]
    fn membership_examples() {
        let c = 10;
        assert_eq!(item_membership(&[c, c, c, c, EOS], 2), vec![0, 0, 1, 1, 1]);
        assert_eq!(item_membership(&[BOS, c, c], 2), vec![0, 0, 0]);
        assert_eq!(item_membership(&[PAD, PAD, c, c, EOS], 2), vec![-1, -1, 0, 0, 0]);
        assert_eq!(item_membership(&[EOS], 3), vec![0]);
    }

    #[test]
    fn mask_examples() {
        let one = item_local_mask(&item_membership(&[9, 9, 9, 9, EOS], 4), false);
        assert!(one.data.iter().all(|&x| x == 0.0));

        let two = item_local_mask(&item_membership(&[9, 9, 9, 9, EOS], 2), false);
        for i in 0..5 {
            for j in 0..5 {
                let same = (i < 2) == (j < 2);
                assert_eq!(two.get(i, j) == 0.0, same, "({i},{j})");
            }
        }

        let dec = item_local_mask(&item_membership(&[BOS, 9, 9], 2), true);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(dec.get(i, j) == 0.0, j <= i);
            }
        }

        let padded = item_local_mask(&[-1, 0, 0], false);
        assert_eq!(padded.get(0, 0), 0.0);
        assert_eq!(padded.get(0, 1), f64::NEG_INFINITY);
        assert_eq!(padded.get(1, 0), f64::NEG_INFINITY);
    }
}
