//! Bundled category attribute tables used by the fixture expansion client.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::bank::AttributeKind;

const TABLE: &str = include_str!("../../fixtures/category_attributes.json");

#[derive(Debug, Deserialize)]
struct Table {
    categories: Vec<Row>,
}

#[derive(Debug, Deserialize)]
struct Row {
    category: String,
    colors: String,
    shapes: String,
    textures: String,
    locations: String,
}

fn table() -> &'static Table {
    static T: OnceLock<Table> = OnceLock::new();
    T.get_or_init(|| serde_json::from_str(TABLE).expect("bundled attribute table parses"))
}

/// Category names in table order.
pub fn fixture_categories() -> Vec<&'static str> {
    table().categories.iter().map(|r| r.category.as_str()).collect()
}

/// The comma-separated column for `(category, kind)`, split and trimmed.
pub fn fixture_terms(category: &str, kind: AttributeKind) -> Option<Vec<String>> {
    let row = table()
        .categories
        .iter()
        .find(|r| r.category.eq_ignore_ascii_case(category.trim()))?;
    let col = match kind {
        AttributeKind::Color => &row.colors,
        AttributeKind::Shape => &row.shapes,
        AttributeKind::Texture => &row.textures,
        AttributeKind::Location => &row.locations,
        AttributeKind::Other | AttributeKind::Pad => return None,
    };
    Some(
        col.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}
