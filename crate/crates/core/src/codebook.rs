//! The annotation codebook's attribute schemas, shipped as `data/codebook.toml`.

use serde::Deserialize;

use crate::attribute::AttributeSchema;

const CODEBOOK: &str = include_str!("../data/codebook.toml");

#[derive(Deserialize)]
struct Codebook {
    schema: Vec<AttributeSchema>,
}

/// All five codebook schemas in file order.
pub fn schemas() -> Vec<AttributeSchema> {
    let book: Codebook = toml::from_str(CODEBOOK).expect("bundled codebook parses");
    book.schema
}

pub fn by_name(name: &str) -> Option<AttributeSchema> {
    schemas().into_iter().find(|s| s.name() == name)
}

pub fn race() -> AttributeSchema {
    by_name("race").expect("codebook has race")
}

pub fn gender() -> AttributeSchema {
    by_name("gender").expect("codebook has gender")
}

pub fn age() -> AttributeSchema {
    by_name("age").expect("codebook has age")
}

pub fn body() -> AttributeSchema {
    by_name("body").expect("codebook has body")
}

pub fn monk_group() -> AttributeSchema {
    by_name("monk_group").expect("codebook has monk_group")
}
