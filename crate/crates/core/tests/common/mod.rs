//! Fixtures and oracles shared by the integration tests.

use genre_core::kg::{KnowledgeGraph, Relation, TransD, Triplet};
use ndarray::{Array1, Array2};

/// 12 entities, 30 triplets covering all six relations.
pub fn toy_graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    let links: &[(Relation, &[(&str, &str)])] = &[
        (Relation::AuthorPublisher, &[("a0", "p0"), ("a1", "p0"), ("a2", "p1"), ("a3", "p2"), ("a0", "p1")]),
        (Relation::AuthorLevel1, &[("a0", "f"), ("a1", "f"), ("a2", "n"), ("a3", "n")]),
        (Relation::AuthorLevel2, &[("a0", "g0"), ("a0", "g1"), ("a1", "g0"), ("a2", "g2"), ("a3", "g2"), ("a1", "g1")]),
        (Relation::PublisherLevel1, &[("p0", "f"), ("p1", "f"), ("p1", "n"), ("p2", "n")]),
        (Relation::PublisherLevel2, &[("p0", "g0"), ("p0", "g1"), ("p1", "g1"), ("p1", "g2"), ("p2", "g2"), ("p2", "g0")]),
        (Relation::Level1Level2, &[("f", "g0"), ("f", "g1"), ("n", "g2"), ("n", "g1"), ("f", "g2")]),
    ];
    for (rel, pairs) in links {
        for (h, t) in *pairs {
            g.link(*rel, h, t).unwrap();
        }
    }
    assert_eq!((g.entities().len(), g.triplets().len()), (12, 30));
    g
}

/// Score with the mapping matrices materialised.
pub fn dense_score(emb: &TransD, t: &Triplet) -> f64 {
    let (de, dr) = (emb.entity_dim(), emb.relation_dim());
    let r = t.relation.index();
    let mapping = |e: usize| {
        let mut m = Array2::<f64>::zeros((dr, de));
        for i in 0..dr {
            for j in 0..de {
                m[[i, j]] = emb.relation_proj[[r, i]] * emb.entity_proj[[e, j]] + if i == j { 1.0 } else { 0.0 };
            }
        }
        m
    };
    let h: Array1<f64> = emb.entity.row(t.head).to_owned();
    let tl: Array1<f64> = emb.entity.row(t.tail).to_owned();
    let v = mapping(t.head).dot(&h) + &emb.relation.row(r) - mapping(t.tail).dot(&tl);
    -v.dot(&v)
}
