use acslm_nodenet::backlog::Backlog;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Put(usize),
    UploadOldest,
    AckThrough(u64),
    Flush,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (1usize..120).prop_map(Op::Put),
        3 => Just(Op::UploadOldest),
        1 => (0u64..40).prop_map(Op::AckThrough),
        1 => Just(Op::Flush),
    ]
}

proptest! {
    #[test]
    fn capacity_and_eviction_order_hold(cap in 120usize..600, ops in prop::collection::vec(op(), 1..80)) {
        let mut b = Backlog::in_memory(cap);
        let mut next = 0u64;
        for op in ops {
            match op {
                Op::Put(size) => {
                    let before = b.seqs();
                    let evicted = b.insert(next, vec![0; size]).unwrap();
                    // Evicted entries are a prefix of what was stored.
                    prop_assert_eq!(&before[..evicted.len()], evicted.as_slice());
                    next += 1;
                }
                Op::UploadOldest => {
                    if let Some((s, _)) = b.oldest() {
                        b.remove(s).unwrap();
                    }
                }
                Op::AckThrough(s) => {
                    b.remove_through(s).unwrap();
                    prop_assert!(b.seqs().iter().all(|&x| x > s));
                }
                Op::Flush => {
                    b.flush().unwrap();
                    prop_assert!(b.is_empty());
                }
            }
            prop_assert!(b.used_bytes() <= cap);
            let sum: usize = b.seqs().iter().map(|&s| b.get(s).unwrap().len()).sum();
            prop_assert_eq!(sum, b.used_bytes());
            let seqs = b.seqs();
            prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

#[test]
fn three_envelope_capacity() {
    let env = vec![0xAB; 512];
    let mut b = Backlog::in_memory(3 * env.len());
    for s in 0..4 {
        b.insert(s, env.clone()).unwrap();
    }
    assert_eq!(b.seqs(), vec![1, 2, 3]);
    assert!(b.insert(9, vec![0; 3 * 512 + 1]).is_err());
    assert_eq!(b.seqs(), vec![1, 2, 3]);
}
