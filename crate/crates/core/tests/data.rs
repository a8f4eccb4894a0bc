//! Task generators and corpus loading.

use mgt_core::data::{gen_copy_batch, load_char_corpus, CopyTask, MIN_CORPUS_BYTES};
use mgt_core::MgtError;

#[test]
fn copy_symbols_are_uniform() {
    let vocab = 16;
    let batch = gen_copy_batch(vocab, 8, 2000, 11).unwrap();
    let symbols = vocab - 1;
    let mut counts = vec![0usize; symbols];
    for seq in batch.tokens.chunks(batch.seq) {
        for &t in &seq[..8] {
            counts[t] += 1;
        }
        assert_eq!(seq[8], vocab - 1);
        assert_eq!(seq[..8], seq[9..]);
    }
    let n: usize = counts.iter().sum();
    let expected = n as f64 / symbols as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 14 degrees of freedom, upper 0.1% point
    assert!(chi2 < 36.12, "chi-square {chi2}");
}

#[test]
fn copy_mask_covers_second_half_only() {
    let task = CopyTask::new(5, 3, 7).unwrap();
    let b = task.batch(2, 0);
    assert_eq!(
        b.mask,
        [false, false, false, false, true, true, true].repeat(2)
    );
    let (targets, mask) = b.shifted_targets();
    for p in 0..b.tokens.len() {
        if mask[p] {
            assert_eq!(targets[p], b.tokens[p + 1]);
        }
    }
}

fn corpus_text() -> String {
    let line = "the quick brown fox jumps over the lazy dog; 0123456789\n";
    line.repeat(MIN_CORPUS_BYTES / line.len() + 5)
}

#[test]
fn corpus_loads_identically_twice() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    std::fs::write(&path, corpus_text()).unwrap();
    let a = load_char_corpus(&path).unwrap();
    let b = load_char_corpus(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.val_batch(0, 3, 10).unwrap(),
        b.val_batch(0, 3, 10).unwrap()
    );
    let round: String = a.decode(&a.train[..20]);
    assert_eq!(round, corpus_text()[..20]);
}

#[test]
fn short_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.txt");
    std::fs::write(&path, "abc").unwrap();
    assert!(matches!(
        load_char_corpus(&path),
        Err(MgtError::Ingestion(_))
    ));
    assert!(load_char_corpus(&dir.path().join("missing.txt")).is_err());
}
