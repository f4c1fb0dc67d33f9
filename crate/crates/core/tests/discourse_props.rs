use dnmt::discourse::{parse_tree, random_tree, DiscourseError, Importance, Node, Relation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn relations() -> Vec<Relation> {
    ["ELABORATION", "CONTRAST", "BACKGROUND", "SAME-UNIT"]
        .iter()
        .map(|r| Relation::new(r).unwrap())
        .collect()
}

fn internal_depth(node: &Node, target: u32) -> Option<usize> {
    match node {
        Node::Leaf { edu_id } => (*edu_id == target).then_some(0),
        Node::Internal { left, right, .. } => internal_depth(&left.node, target)
            .or_else(|| internal_depth(&right.node, target))
            .map(|d| d + 1),
    }
}

/// Makes the first internal node found in pre-order all-satellite.
fn demote_first_internal(node: &mut Node) -> bool {
    if let Node::Internal { left, right, .. } = node {
        left.importance = Importance::Satellite;
        right.importance = Importance::Satellite;
        return true;
    }
    false
}

proptest! {
    #[test]
    fn generated_trees_roundtrip_and_paths_are_consistent(
        seed in any::<u64>(),
        lengths in proptest::collection::vec(1usize..5, 1..12),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, &lengths, &relations());
        let text = tree.to_sexpr();
        let back = parse_tree(&text).unwrap();
        prop_assert_eq!(&back, &tree);
        prop_assert_eq!(back.to_sexpr(), text);

        for span in tree.spans() {
            let path = tree.extract_path(span.edu_id).unwrap();
            prop_assert_eq!(Some(path.len()), internal_depth(tree.root(), span.edu_id));
        }

        let n = tree.token_count();
        let paths = tree.token_paths(n, 16).unwrap();
        for span in tree.spans() {
            for t in span.start..span.end {
                prop_assert_eq!(&paths[t], &paths[span.start]);
            }
        }
    }

    #[test]
    fn mutated_trees_are_rejected(
        seed in any::<u64>(),
        lengths in proptest::collection::vec(1usize..5, 2..12),
        which in any::<prop::sample::Index>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng, &lengths, &relations());

        let mut spans = tree.spans().to_vec();
        let k = 1 + which.index(spans.len() - 1);
        spans[k].start -= 1;
        let overlap = dnmt::discourse::DiscourseTree::from_root(tree.root().clone(), spans);
        let overlap_rejected = matches!(overlap, Err(DiscourseError::Invariant { .. }));
        prop_assert!(overlap_rejected);

        let mut root = tree.root().clone();
        prop_assert!(demote_first_internal(&mut root));
        let demoted = dnmt::discourse::DiscourseTree::from_root(root, tree.spans().to_vec());
        let demoted_rejected = matches!(demoted, Err(DiscourseError::Invariant { .. }));
        prop_assert!(demoted_rejected);

        let swapped = tree.to_sexpr().replacen("(N ", "(S ", usize::MAX);
        prop_assert!(parse_tree(&swapped).is_err());
    }
}
