use proptest::prelude::*;

use tabrel::table::{flatten_table, linearize_table, reconstruct_table, tokenize_linearize, Table, TokenTag};
use tabrel::vocab::Vocabulary;

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,8}",
        "[0-9]{1,4}",
        "[a-z]{1,5} [a-z0-9]{1,5}",
        "[0-9]{1,3}\\.[0-9]{1,2}",
        "[a-z]{1,4}-[a-z]{1,4}",
        "[A-Z][a-z]{0,6}, [a-z]{1,3}",
    ]
}

fn table() -> impl Strategy<Value = Table> {
    (1usize..6, 1usize..8).prop_flat_map(|(cols, rows)| {
        (
            prop::collection::vec(cell(), cols),
            prop::collection::vec(prop::collection::vec(cell(), cols), rows),
        )
            .prop_map(|(h, r)| Table::new(h, r).expect("generated cells are valid"))
    })
}

fn vocab_for(t: &Table) -> Vocabulary {
    let flat = flatten_table(t);
    Vocabulary::build([flat.as_str()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn linearization_round_trips(t in table()) {
        let lin = linearize_table(&t, &vocab_for(&t));
        prop_assert_eq!(reconstruct_table(&lin).unwrap(), t);
    }

    #[test]
    fn round_trip_without_the_vocabulary_knowing_any_cell(t in table()) {
        let lin = linearize_table(&t, &Vocabulary::build(std::iter::empty::<&str>()));
        prop_assert_eq!(reconstruct_table(&lin).unwrap(), t);
    }

    #[test]
    fn token_map_partitions_the_table_region(t in table()) {
        let lin = linearize_table(&t, &vocab_for(&t));
        prop_assert_eq!(lin.token_cell_map.len(), lin.tokens.len());
        // every cell owns at least one token, contiguous and in reading order
        let coords: Vec<_> = lin.cell_texts().into_iter().map(|(c, _)| c).collect();
        let expected: Vec<_> = (0..=t.n_rows())
            .flat_map(|r| (0..t.n_cols()).map(move |c| tabrel::table::CellCoord::new(r, c)))
            .collect();
        prop_assert_eq!(coords, expected);
        for (c, text) in lin.cell_texts() {
            prop_assert_eq!(text.as_str(), t.cell(c));
        }
        let markers = lin.token_cell_map.iter().filter(|g| g.is_marker()).count();
        let separators = lin.token_cell_map.iter().filter(|g| **g == TokenTag::Separator).count();
        prop_assert_eq!(separators, (t.n_rows() + 1) * (t.n_cols() - 1));
        prop_assert_eq!(markers, 2 + 3 * t.n_rows() + separators);
    }

    #[test]
    fn flattening_is_injective_under_single_cell_edits(t in table(), r in 0usize..8, c in 0usize..6, v in cell()) {
        let (mut header, mut rows) = t.clone().into_parts();
        let r = r % (rows.len() + 1);
        let c = c % header.len();
        let slot = if r == 0 { &mut header[c] } else { &mut rows[r - 1][c] };
        prop_assume!(*slot != v);
        *slot = v;
        let u = Table::new(header, rows).unwrap();
        prop_assert_ne!(flatten_table(&t), flatten_table(&u));
    }

    #[test]
    fn question_prefix_sets_the_boundary(t in table(), q in "[a-z]{1,6}( [a-z]{1,6}){0,5}\\?") {
        let v = vocab_for(&t);
        let enc = tokenize_linearize(&t, &q, &v);
        prop_assert_eq!(enc.boundary, v.encode(&q).len());
        prop_assert_eq!(&enc.ids[enc.boundary..], &enc.table.tokens[..]);
        prop_assert_eq!(enc.table_len(), enc.table.len());
    }
}
