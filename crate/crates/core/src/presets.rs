//! The shipped driving-scene template, its dependency graph, and typical
//! per-field lengths.
//!
//! Lanes are enumerated first and then described over up to three time
//! ranges; critical objects are enumerated first and then described in up
//! to four parallel groups of position, type and justification.

use crate::analysis::{load_lengths, AnalysisError};
use crate::graph::{load_graph, DependencyGraph};
use crate::template::{load_template, ByteTokenizer, TemplateSpec};

pub const AV_TEMPLATE: &str = include_str!("../configs/av_template.json");
pub const AV_GRAPH: &str = include_str!("../configs/av_graph.json");
pub const AV_LENGTHS: &str = include_str!("../configs/av_lengths.json");

pub fn av_template() -> TemplateSpec {
    load_template(AV_TEMPLATE, &ByteTokenizer).expect("shipped template is valid")
}

pub fn av_example() -> (TemplateSpec, DependencyGraph) {
    let template = av_template();
    let graph = load_graph(AV_GRAPH, &template).expect("shipped graph is valid");
    (template, graph)
}

/// Typical realized lengths per field, in template order.
pub fn av_typical_lengths(template: &TemplateSpec) -> Result<Vec<f64>, AnalysisError> {
    load_lengths(AV_LENGTHS, template)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_load() {
        let (t, g) = av_example();
        assert_eq!(t.len(), 29);
        assert_eq!(g.edges().len(), 41);
        assert_eq!(g.sources().len(), 10);
        let lengths = av_typical_lengths(&t).unwrap();
        let total: f64 = lengths.iter().sum();
        assert!((300.0..=500.0).contains(&total));
        let capacity: usize = t.max_lens().iter().sum();
        assert!((300..=500).contains(&capacity));
    }
}
