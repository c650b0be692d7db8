/// Attention mask over tokens ordered `[global | auxiliary CLS (m) | patches (n)]`.
/// Entry `q * T + k` is true when query `q` may attend key `k`. The global
/// token and the patches never see auxiliary tokens; auxiliary queries see
/// everything.
pub fn build_attention_mask(m: usize, n: usize) -> Vec<bool> {
    let t = 1 + m + n;
    let is_aux = |i: usize| (1..1 + m).contains(&i);
    let mut mask = vec![true; t * t];
    for q in 0..t {
        if is_aux(q) {
            continue;
        }
        for k in 1..1 + m {
            mask[q * t + k] = false;
        }
    }
    mask
}
