//! Causal masks, additive form: 0.0 where attention is allowed and -inf
//! where it is blocked.

/// Mask for a stream of `t_items * k` tokens, item-major. A query token may
/// attend to every token whose item comes at or before its own, so tokens
/// of one item see each other in both directions while later items stay
/// invisible. `k = 1` degenerates to the plain causal mask over items.
pub fn token_causal_mask(t_items: usize, k: usize) -> Vec<f32> {
    let l = t_items * k;
    let mut m = vec![f32::NEG_INFINITY; l * l];
    for p in 0..l {
        let qi = p / k;
        let row = &mut m[p * l..(p + 1) * l];
        for (q, slot) in row.iter_mut().enumerate() {
            if q / k <= qi {
                *slot = 0.0;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_items_of_two_tokens_mask_exactly_the_upper_item_block() {
        let inf = f32::NEG_INFINITY;
        let want = vec![
            0., 0., inf, inf, // token 0 of item 0
            0., 0., inf, inf, // token 1 of item 0
            0., 0., 0., 0., // item 1 sees everything
            0., 0., 0., 0.,
        ];
        assert_eq!(token_causal_mask(2, 2), want);
    }

    #[test]
    fn k_equal_one_is_the_lower_triangular_causal_mask() {
        let m = token_causal_mask(3, 1);
        for i in 0..3 {
            for j in 0..3 {
                let allowed = m[i * 3 + j] == 0.0;
                assert_eq!(allowed, j <= i, "query {i} key {j}");
            }
        }
    }

    #[test]
    fn every_row_allows_at_least_its_own_item() {
        for (t, k) in [(1, 1), (1, 3), (4, 2), (5, 5)] {
            let l = t * k;
            let m = token_causal_mask(t, k);
            for p in 0..l {
                let allowed = m[p * l..(p + 1) * l].iter().filter(|&&v| v == 0.0).count();
                assert_eq!(allowed, (p / k + 1) * k);
            }
        }
    }
}
