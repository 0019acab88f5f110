//! JSON Schema validation for documents this crate reads and writes.

use jsonschema::JSONSchema;
use once_cell::sync::Lazy;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaKind {
    Har,
    Profile,
    FixtureBundle,
    Config,
    Index,
    ManifestModel,
    Permissions,
    Trackers,
    FlowMeta,
    Findings,
    Entities,
    Summary,
    Log,
    ReportModel,
    ApiError,
}

impl SchemaKind {
    /// Entry in `documents.schema.json`, for the stored document kinds.
    fn definition(self) -> Option<&'static str> {
        Some(match self {
            SchemaKind::Har | SchemaKind::Profile | SchemaKind::FixtureBundle => return None,
            SchemaKind::Config => "config",
            SchemaKind::Index => "index",
            SchemaKind::ManifestModel => "manifest_model_document",
            SchemaKind::Permissions => "permissions_document",
            SchemaKind::Trackers => "trackers_document",
            SchemaKind::FlowMeta => "flow_meta_document",
            SchemaKind::Findings => "findings_document",
            SchemaKind::Entities => "entities_document",
            SchemaKind::Summary => "summary_document",
            SchemaKind::Log => "log_document",
            SchemaKind::ReportModel => "report_model",
            SchemaKind::ApiError => "api_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaIssue {
    /// JSON pointer into the instance.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", if self.path.is_empty() { "/" } else { &self.path }, self.message)
    }
}

fn compile(text: &str) -> JSONSchema {
    let schema: Value = serde_json::from_str(text).expect("bundled schema is JSON");
    JSONSchema::compile(&schema).expect("bundled schema compiles")
}

macro_rules! schema {
    ($name:ident, $file:literal) => {
        static $name: Lazy<JSONSchema> = Lazy::new(|| compile(include_str!(concat!("../data/schemas/", $file))));
    };
}

schema!(HAR, "har-1.2.schema.json");
schema!(PROFILE, "device-profile.schema.json");
schema!(BUNDLE, "fixture-bundle.schema.json");

pub const DOCUMENTS_SCHEMA: &str = include_str!("../data/schemas/documents.schema.json");

static DOCUMENTS: Lazy<Vec<(SchemaKind, JSONSchema)>> = Lazy::new(|| {
    let all: Value = serde_json::from_str(DOCUMENTS_SCHEMA).expect("bundled schema is JSON");
    let kinds = [
        SchemaKind::Config,
        SchemaKind::Index,
        SchemaKind::ManifestModel,
        SchemaKind::Permissions,
        SchemaKind::Trackers,
        SchemaKind::FlowMeta,
        SchemaKind::Findings,
        SchemaKind::Entities,
        SchemaKind::Summary,
        SchemaKind::Log,
        SchemaKind::ReportModel,
        SchemaKind::ApiError,
    ];
    kinds
        .into_iter()
        .map(|k| {
            let root = serde_json::json!({
                "$schema": all["$schema"],
                "$ref": format!("#/definitions/{}", k.definition().expect("document kind")),
                "definitions": all["definitions"],
            });
            (k, JSONSchema::compile(&root).expect("bundled schema compiles"))
        })
        .collect()
});

pub fn validate(kind: SchemaKind, instance: &Value) -> Result<(), Vec<SchemaIssue>> {
    let schema: &JSONSchema = match kind {
        SchemaKind::Har => &HAR,
        SchemaKind::Profile => &PROFILE,
        SchemaKind::FixtureBundle => &BUNDLE,
        k => &DOCUMENTS.iter().find(|(d, _)| *d == k).expect("every document kind compiled").1,
    };
    schema.validate(instance).map_err(|errors| {
        errors
            .map(|e| SchemaIssue {
                path: e.instance_path.to_string(),
                message: e.to_string(),
            })
            .collect()
    })
}
