//! Hand-worked degree-0 and degree-1 cases.

mod common;

use common::*;
use neumann_ra::combinatorics::{enumerate_partitions, AnnotatedWord, Letter, SetPartition, Terminal};
use neumann_ra::folding::{class_aggregates, closed_form_weights_d0, neumann_weights, GramContext};

#[test]
fn degree_one_words_signs_lengths_and_graphs() {
    use Letter::*;
    use Terminal::*;
    // (letter, terminal, sign, L, edges on 1-based positions)
    let table: [(Letter, Terminal, i8, usize, &[(usize, usize)]); 6] = [
        (I, Anchor, 1, 1, &[]),
        (I, Avg, -1, 2, &[(1, 2)]),
        (U, Anchor, -1, 2, &[(1, 2)]),
        (U, Avg, 1, 3, &[(1, 2), (2, 3)]),
        (V, Anchor, 1, 3, &[(1, 2)]),
        (V, Avg, -1, 4, &[(1, 2), (3, 4)]),
    ];
    for (letter, chi, sign, len, edges) in table {
        let w = AnnotatedWord::new(vec![letter], chi);
        assert_eq!(w.sign, sign, "{w}");
        assert_eq!(w.len, len, "{w}");
        let mut got: Vec<(usize, usize)> = w.edges.iter().map(|&(a, b)| (a.min(b) + 1, a.max(b) + 1)).collect();
        got.sort();
        assert_eq!(got, edges, "{w}");
        let bell = [1, 2, 5, 15][len - 1];
        assert_eq!(enumerate_partitions(len).unwrap().len(), bell);
    }
}

#[test]
fn word_u_anchor_class_aggregates_by_hand() {
    let design = gaussian_design(6, 2, 41);
    let ctx = GramContext::new(&design);
    let x = design.matrix();
    let ip = |a: usize, b: usize| x.row(a).dot(&x.row(b));
    let word = AnnotatedWord::new(vec![Letter::U], Terminal::Anchor);
    let split = SetPartition::from_blocks(&[vec![0], vec![1]]).unwrap();
    let merged = SetPartition::single_block(2);
    for i in 0..6 {
        // split: Σ_{ω1≠ω2} ⟨x_ω1, x_ω2⟩⟨x_ω2, x_i⟩, class 0 avoids i, class 1 uses it once
        let (mut c0, mut c1) = (0.0, 0.0);
        for a in 0..6 {
            for b in 0..6 {
                if a == b {
                    continue;
                }
                let v = ip(a, b) * ip(b, i);
                match (a == i) as u8 + (b == i) as u8 {
                    0 => c0 += v,
                    _ => c1 += v,
                }
            }
        }
        let (e0, e1) = class_aggregates(&word, &split, i, &ctx).unwrap();
        assert!((e0 - c0).abs() < 1e-10 && (e1 - c1).abs() < 1e-10);

        // merged: Σ_ω ‖x_ω‖² ⟨x_ω, x_i⟩
        let (mut m0, mut m1) = (0.0, 0.0);
        for a in 0..6 {
            let v = ip(a, a) * ip(a, i);
            if a == i {
                m1 += v;
            } else {
                m0 += v;
            }
        }
        let (e0, e1) = class_aggregates(&word, &merged, i, &ctx).unwrap();
        assert!((e0 - m0).abs() < 1e-10 && (e1 - m1).abs() < 1e-10);
    }
}

#[test]
fn degree_zero_closed_form_by_derivation() {
    for (n, p, m) in [(10, 2, 4), (25, 3, 7), (40, 1, 39)] {
        let design = gaussian_design(n, p, n as u64);
        let ctx = GramContext::new(&design);
        let expected = degree_zero_closed_form(&design, m);
        let engine = neumann_weights(0, m, &ctx).unwrap();
        let closed = closed_form_weights_d0(m, &ctx).unwrap();
        for i in 0..n {
            assert!((engine.xi[i] - expected[i]).abs() <= 1e-12 * expected[i].abs().max(1.0));
            assert!((closed.xi[i] - expected[i]).abs() <= 1e-12 * expected[i].abs().max(1.0));
        }
        // weights are centred: Σ_i (‖x_i‖² − p) = 0
        assert!(engine.xi.iter().sum::<f64>().abs() < 1e-10);
    }
}

#[test]
fn census_weights_vanish() {
    let design = gaussian_design(12, 3, 5);
    let ctx = GramContext::new(&design);
    for d in 0..=3 {
        assert!(neumann_weights(d, 12, &ctx).unwrap().xi.iter().all(|&v| v == 0.0));
    }
}
