use crate::linalg::RngStream;

/// Sequences from a seeded sparse Markov chain: each token has a few
/// preferred successors, so next-token loss can be driven well below
/// `ln(vocab)`.
pub fn toy_corpus(n_seqs: usize, len: usize, vocab: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let fanout = 2.min(vocab);
    let successors: Vec<Vec<usize>> = (0..vocab).map(|_| (0..fanout).map(|_| rng.below(vocab)).collect()).collect();
    (0..n_seqs)
        .map(|_| {
            let mut t = rng.below(vocab);
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                seq.push(t);
                t = successors[t][rng.below(fanout)];
            }
            seq
        })
        .collect()
}

/// Uniformly random token sequences.
pub fn random_tokens(n_seqs: usize, len: usize, vocab: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    (0..n_seqs).map(|_| (0..len).map(|_| rng.below(vocab)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_in_range() {
        let a = toy_corpus(4, 10, 7, &mut RngStream::new(3));
        let b = toy_corpus(4, 10, 7, &mut RngStream::new(3));
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&t| t < 7));
        assert!(a.iter().all(|s| s.len() == 10));
    }
}
