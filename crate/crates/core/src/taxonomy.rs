//! Google Play Data safety taxonomy.
//!
//! The hierarchy (categories, data types, purposes) and the three-group scope
//! mapping live in a bundled data file, `data/taxonomy.toml`. Identifiers are
//! small indices into the process-wide [`Taxonomy`]; they serialize as the
//! stable string ids from the data file.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const BUNDLED_TAXONOMY: &str = include_str!("../data/taxonomy.toml");
const BUNDLED_STORE_CATEGORIES: &str = include_str!("../data/store_categories.toml");

pub const SUPPORTED_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy file is not valid TOML: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unsupported taxonomy schema_version {0}")]
    SchemaVersion(u32),
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("data type `{data_type}` references unknown category `{category}`")]
    UnknownCategory { data_type: String, category: String },
    #[error("category `{0}` has no data types")]
    EmptyCategory(String),
    #[error("name or synonym `{text}` maps to both `{first}` and `{second}`")]
    AmbiguousName {
        text: String,
        first: String,
        second: String,
    },
    #[error("scope groups must partition the categories: {0}")]
    BadScopeGroups(String),
    #[error("too many {0} entries")]
    TooMany(&'static str),
}

/// One of the three Data safety privacy practices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PracticeKind {
    Collection,
    Sharing,
    SecurityPractice,
}

impl PracticeKind {
    /// The two practices audited by the pipeline.
    pub const AUDITED: [PracticeKind; 2] = [PracticeKind::Collection, PracticeKind::Sharing];

    pub fn as_str(self) -> &'static str {
        match self {
            PracticeKind::Collection => "collection",
            PracticeKind::Sharing => "sharing",
            PracticeKind::SecurityPractice => "security_practice",
        }
    }

    pub fn is_audited(self) -> bool {
        matches!(self, PracticeKind::Collection | PracticeKind::Sharing)
    }
}

impl fmt::Display for PracticeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PracticeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "collection" | "collected" | "collect" => Ok(PracticeKind::Collection),
            "sharing" | "shared" | "share" => Ok(PracticeKind::Sharing),
            "security_practice" | "security" => Ok(PracticeKind::SecurityPractice),
            other => Err(format!("unknown practice `{other}`")),
        }
    }
}

/// How the analyzer stage is split into scoped prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    Single,
    ThreeGroups,
    PerCategory,
    PerDataType,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::Single,
        PromptStrategy::ThreeGroups,
        PromptStrategy::PerCategory,
        PromptStrategy::PerDataType,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::Single => "single",
            PromptStrategy::ThreeGroups => "three-groups",
            PromptStrategy::PerCategory => "per-category",
            PromptStrategy::PerDataType => "per-data-type",
        }
    }

    /// Number of analyzer prompts per practice under the bundled taxonomy.
    pub fn prompt_count(self) -> usize {
        scope_groups(self).len()
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "1" => Ok(PromptStrategy::Single),
            "three-groups" | "three_groups" | "3" => Ok(PromptStrategy::ThreeGroups),
            "per-category" | "per_category" | "14" => Ok(PromptStrategy::PerCategory),
            "per-data-type" | "per_data_type" | "38" => Ok(PromptStrategy::PerDataType),
            other => Err(format!("unknown prompt strategy `{other}`")),
        }
    }
}

macro_rules! taxonomy_id {
    ($name:ident, $kind:literal, $table:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(u8);

        impl $name {
            /// Position in the canonical taxonomy order.
            pub fn index(self) -> usize {
                self.0 as usize
            }

            /// Stable symbolic id, e.g. `approximate_location`.
            pub fn key(self) -> &'static str {
                &taxonomy().$table[self.index()].id
            }

            /// Human-readable display name.
            pub fn name(self) -> &'static str {
                &taxonomy().$table[self.index()].name
            }

            pub fn from_key(key: &str) -> Option<Self> {
                let t = taxonomy();
                t.$table
                    .iter()
                    .position(|e| e.id == key)
                    .map(|i| $name(i as u8))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.key())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $name::from_key(s).ok_or_else(|| format!("unknown {} id `{}`", $kind, s))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.key())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

taxonomy_id!(DataCategoryId, "data_category", categories);
taxonomy_id!(DataTypeId, "data_type", data_types);
taxonomy_id!(PurposeId, "purpose", purposes);

impl DataTypeId {
    pub fn category(self) -> DataCategoryId {
        taxonomy().data_types[self.index()].category
    }
}

impl DataCategoryId {
    /// Member data types in canonical order.
    pub fn data_types(self) -> impl Iterator<Item = DataTypeId> {
        all_data_types()
            .into_iter()
            .filter(move |t| t.category() == self)
    }
}

/// A set of categories (optionally narrowed to one type) covered by one
/// analyzer prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeDescriptor {
    pub label: String,
    pub categories: BTreeSet<DataCategoryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub only_type: Option<DataTypeId>,
}

impl ScopeDescriptor {
    /// Data types in scope, canonical order.
    pub fn data_types(&self) -> Vec<DataTypeId> {
        match self.only_type {
            Some(t) => vec![t],
            None => all_data_types()
                .into_iter()
                .filter(|t| self.categories.contains(&t.category()))
                .collect(),
        }
    }

    pub fn slug(&self) -> String {
        let mut out = String::new();
        for c in self.label.chars() {
            if c.is_ascii_alphanumeric() {
                out.push(c.to_ascii_lowercase());
            } else if !out.ends_with('-') {
                out.push('-');
            }
        }
        out.trim_matches('-').to_string()
    }
}

#[derive(Debug, Deserialize)]
struct RawTaxonomy {
    schema_version: u32,
    #[serde(default)]
    revision: String,
    category: Vec<RawEntry>,
    data_type: Vec<RawDataType>,
    purpose: Vec<RawEntry>,
    scope_group: Vec<RawScopeGroup>,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    id: String,
    name: String,
    #[serde(default)]
    synonyms: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawDataType {
    id: String,
    name: String,
    category: String,
    #[serde(default)]
    synonyms: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawScopeGroup {
    label: String,
    categories: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawStoreCategories {
    categories: Vec<String>,
}

#[derive(Debug)]
struct Entry {
    id: String,
    name: String,
}

#[derive(Debug)]
struct TypeEntry {
    id: String,
    name: String,
    category: DataCategoryId,
    synonyms: Vec<String>,
}

#[derive(Debug)]
struct ScopeGroup {
    label: String,
    categories: BTreeSet<DataCategoryId>,
}

/// The loaded taxonomy. Immutable once built.
#[derive(Debug)]
pub struct Taxonomy {
    schema_version: u32,
    revision: String,
    categories: Vec<Entry>,
    data_types: Vec<TypeEntry>,
    purposes: Vec<Entry>,
    groups: Vec<ScopeGroup>,
    type_lookup: HashMap<String, DataTypeId>,
    purpose_lookup: HashMap<String, PurposeId>,
    store_categories: Vec<String>,
}

impl Taxonomy {
    pub fn bundled() -> Result<Self, TaxonomyError> {
        Self::from_toml(BUNDLED_TAXONOMY)
    }

    /// Parses and validates a taxonomy file.
    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        let raw: RawTaxonomy = toml::from_str(text)?;
        if raw.schema_version != SUPPORTED_SCHEMA_VERSION {
            return Err(TaxonomyError::SchemaVersion(raw.schema_version));
        }
        if raw.category.len() > 255 || raw.data_type.len() > 255 || raw.purpose.len() > 255 {
            return Err(TaxonomyError::TooMany("taxonomy"));
        }

        let mut cat_index = HashMap::new();
        let mut categories = Vec::new();
        for (i, c) in raw.category.iter().enumerate() {
            if cat_index.insert(c.id.clone(), DataCategoryId(i as u8)).is_some() {
                return Err(TaxonomyError::DuplicateId {
                    kind: "category",
                    id: c.id.clone(),
                });
            }
            categories.push(Entry {
                id: c.id.clone(),
                name: c.name.clone(),
            });
        }

        let mut data_types = Vec::new();
        let mut type_lookup: HashMap<String, DataTypeId> = HashMap::new();
        let mut seen_ids = BTreeSet::new();
        for (i, t) in raw.data_type.iter().enumerate() {
            if !seen_ids.insert(t.id.clone()) {
                return Err(TaxonomyError::DuplicateId {
                    kind: "data_type",
                    id: t.id.clone(),
                });
            }
            let category = *cat_index
                .get(&t.category)
                .ok_or_else(|| TaxonomyError::UnknownCategory {
                    data_type: t.id.clone(),
                    category: t.category.clone(),
                })?;
            let id = DataTypeId(i as u8);
            for text in std::iter::once(&t.name)
                .chain(std::iter::once(&t.id))
                .chain(t.synonyms.iter())
            {
                let key = normalize_key(text);
                if let Some(prev) = type_lookup.insert(key.clone(), id) {
                    if prev != id {
                        return Err(TaxonomyError::AmbiguousName {
                            text: text.clone(),
                            first: raw.data_type[prev.index()].id.clone(),
                            second: t.id.clone(),
                        });
                    }
                }
            }
            data_types.push(TypeEntry {
                id: t.id.clone(),
                name: t.name.clone(),
                category,
                synonyms: t.synonyms.clone(),
            });
        }
        for (i, c) in categories.iter().enumerate() {
            if !data_types.iter().any(|t| t.category.index() == i) {
                return Err(TaxonomyError::EmptyCategory(c.id.clone()));
            }
        }

        let mut purposes = Vec::new();
        let mut purpose_lookup = HashMap::new();
        for (i, p) in raw.purpose.iter().enumerate() {
            let id = PurposeId(i as u8);
            if purposes.iter().any(|e: &Entry| e.id == p.id) {
                return Err(TaxonomyError::DuplicateId {
                    kind: "purpose",
                    id: p.id.clone(),
                });
            }
            for text in std::iter::once(&p.name)
                .chain(std::iter::once(&p.id))
                .chain(p.synonyms.iter())
            {
                purpose_lookup.insert(normalize_key(text), id);
            }
            purposes.push(Entry {
                id: p.id.clone(),
                name: p.name.clone(),
            });
        }

        let mut groups = Vec::new();
        let mut covered = BTreeSet::new();
        for g in &raw.scope_group {
            let mut set = BTreeSet::new();
            for c in &g.categories {
                let id = *cat_index.get(c).ok_or_else(|| {
                    TaxonomyError::BadScopeGroups(format!(
                        "group `{}` names unknown category `{c}`",
                        g.label
                    ))
                })?;
                if !covered.insert(id) {
                    return Err(TaxonomyError::BadScopeGroups(format!(
                        "category `{c}` appears in more than one group"
                    )));
                }
                set.insert(id);
            }
            groups.push(ScopeGroup {
                label: g.label.clone(),
                categories: set,
            });
        }
        if covered.len() != categories.len() {
            return Err(TaxonomyError::BadScopeGroups(format!(
                "groups cover {} of {} categories",
                covered.len(),
                categories.len()
            )));
        }

        let stores: RawStoreCategories =
            toml::from_str(BUNDLED_STORE_CATEGORIES).map_err(TaxonomyError::Syntax)?;

        Ok(Taxonomy {
            schema_version: raw.schema_version,
            revision: raw.revision,
            categories,
            data_types,
            purposes,
            groups,
            type_lookup,
            purpose_lookup,
            store_categories: stores.categories,
        })
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn revision(&self) -> &str {
        &self.revision
    }

    pub fn store_categories(&self) -> &[String] {
        &self.store_categories
    }
}

static GLOBAL: OnceLock<Taxonomy> = OnceLock::new();

/// The process-wide taxonomy; the bundled file unless [`install`] ran first.
pub fn taxonomy() -> &'static Taxonomy {
    GLOBAL.get_or_init(|| Taxonomy::bundled().expect("bundled taxonomy is valid"))
}

/// Replaces the bundled taxonomy. Only effective before first use; on
/// failure the rejected taxonomy is handed back.
pub fn install(t: Taxonomy) -> Result<(), Box<Taxonomy>> {
    GLOBAL.set(t).map_err(Box::new)
}

pub fn all_categories() -> Vec<DataCategoryId> {
    (0..taxonomy().categories.len())
        .map(|i| DataCategoryId(i as u8))
        .collect()
}

pub fn all_data_types() -> Vec<DataTypeId> {
    (0..taxonomy().data_types.len())
        .map(|i| DataTypeId(i as u8))
        .collect()
}

pub fn all_purposes() -> Vec<PurposeId> {
    (0..taxonomy().purposes.len())
        .map(|i| PurposeId(i as u8))
        .collect()
}

pub fn category_of(t: DataTypeId) -> DataCategoryId {
    t.category()
}

/// Lowercases, folds `&`/`_`/`-` and collapses whitespace; `identifiers`
/// is folded to `ids`.
fn normalize_key(text: &str) -> String {
    let lowered = text
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '.' | ':' | ';' | ',' | '`' | '*'))
        .to_lowercase()
        .replace('&', " and ")
        .replace(['_', '-', '/'], " ");
    lowered
        .split_whitespace()
        .map(|w| match w {
            "identifiers" => "ids",
            "identifier" => "id",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps free text (e.g. a model's `data_type` field) to a data type.
///
/// Matching is case-insensitive and whitespace-normalized against display
/// names, ids and the synonym table, with a single plural/singular retry.
/// The language hint is accepted for interface stability; the synonym table
/// is English only.
pub fn resolve_data_type(free_text: &str, _lang_hint: Option<&str>) -> Option<DataTypeId> {
    let key = normalize_key(free_text);
    if key.is_empty() {
        return None;
    }
    let lookup = &taxonomy().type_lookup;
    if let Some(t) = lookup.get(&key) {
        return Some(*t);
    }
    if let Some(stem) = key.strip_suffix('s') {
        if let Some(t) = lookup.get(stem) {
            return Some(*t);
        }
    }
    lookup.get(&format!("{key}s")).copied()
}

/// Display name followed by the synonym table entries of a data type.
pub fn data_type_terms(t: DataTypeId) -> Vec<String> {
    let e = &taxonomy().data_types[t.index()];
    std::iter::once(e.name.clone())
        .chain(e.synonyms.iter().cloned())
        .collect()
}

pub fn resolve_purpose(free_text: &str) -> Option<PurposeId> {
    taxonomy()
        .purpose_lookup
        .get(&normalize_key(free_text))
        .copied()
}

/// Splits a rendered purpose list such as
/// `"App functionality, Fraud prevention, security, and compliance"`.
///
/// Purpose names may themselves contain commas, so this matches the longest
/// known purpose at each position instead of splitting on separators.
pub fn parse_purpose_list(text: &str) -> Result<Vec<PurposeId>, String> {
    let words: Vec<String> = normalize_key(&text.replace(',', " , "))
        .split(' ')
        .map(str::to_string)
        .collect();
    let lookup = &taxonomy().purpose_lookup;
    let mut out: Vec<PurposeId> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if matches!(words[i].as_str(), "," | "and" | "") {
            i += 1;
            continue;
        }
        let mut matched = None;
        for end in (i + 1..=words.len()).rev() {
            let candidate: String = words[i..end]
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(" ")
                .replace(" , ", ", ");
            let key = normalize_key(&candidate);
            if let Some(p) = lookup.get(&key) {
                matched = Some((*p, end));
                break;
            }
            let without_commas = key.replace(" ,", "").replace(',', "");
            if let Some(p) = lookup.get(&normalize_key(&without_commas)) {
                matched = Some((*p, end));
                break;
            }
        }
        match matched {
            Some((p, end)) => {
                if !out.contains(&p) {
                    out.push(p);
                }
                i = end;
            }
            None => {
                let rest: Vec<&str> = words[i..]
                    .iter()
                    .map(String::as_str)
                    .take_while(|w| *w != ",")
                    .collect();
                return Err(rest.join(" "));
            }
        }
    }
    Ok(out)
}

/// Resolves a category display name or id.
pub fn resolve_category(free_text: &str) -> Option<DataCategoryId> {
    let key = normalize_key(free_text);
    let t = taxonomy();
    t.categories
        .iter()
        .position(|c| normalize_key(&c.name) == key || normalize_key(&c.id) == key)
        .map(|i| DataCategoryId(i as u8))
}

/// Scope descriptors for a prompt strategy. Every strategy's descriptors
/// partition the full category set.
pub fn scope_groups(strategy: PromptStrategy) -> Vec<ScopeDescriptor> {
    let t = taxonomy();
    match strategy {
        PromptStrategy::Single => vec![ScopeDescriptor {
            label: "All data categories".to_string(),
            categories: all_categories().into_iter().collect(),
            only_type: None,
        }],
        PromptStrategy::ThreeGroups => t
            .groups
            .iter()
            .map(|g| ScopeDescriptor {
                label: g.label.clone(),
                categories: g.categories.clone(),
                only_type: None,
            })
            .collect(),
        PromptStrategy::PerCategory => all_categories()
            .into_iter()
            .map(|c| ScopeDescriptor {
                label: c.name().to_string(),
                categories: BTreeSet::from([c]),
                only_type: None,
            })
            .collect(),
        PromptStrategy::PerDataType => all_data_types()
            .into_iter()
            .map(|d| ScopeDescriptor {
                label: d.name().to_string(),
                categories: BTreeSet::from([d.category()]),
                only_type: Some(d),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ty(key: &str) -> DataTypeId {
        DataTypeId::from_key(key).unwrap()
    }

    #[test]
    fn sizes_match_google_play_docs() {
        assert_eq!(all_categories().len(), 14);
        assert_eq!(all_data_types().len(), 38);
        assert_eq!(all_purposes().len(), 7);
    }

    #[test]
    fn category_mapping_samples() {
        assert_eq!(category_of(ty("approximate_location")).key(), "location");
        assert_eq!(category_of(ty("email_address")).key(), "personal_info");
        assert_eq!(category_of(ty("purchase_history")).key(), "financial_info");
    }

    #[test]
    fn ordering_is_deterministic() {
        assert_eq!(all_data_types(), all_data_types());
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(
            resolve_data_type("approximate location", None),
            Some(ty("approximate_location"))
        );
        assert_eq!(
            resolve_data_type("Email Address", None),
            Some(ty("email_address"))
        );
        assert_eq!(resolve_data_type("blood pressure trends of my cat", None), None);
        assert_eq!(resolve_data_type("E-mail addresses", None), Some(ty("email_address")));
        assert_eq!(resolve_data_type("Device and Other IDs", None), Some(ty("device_or_other_ids")));
        assert_eq!(resolve_data_type("User identifiers", None), Some(ty("user_ids")));
        assert_eq!(resolve_data_type("  Crash log ", None), Some(ty("crash_logs")));
        assert_eq!(resolve_data_type("", None), None);
    }

    #[test]
    fn purpose_list_with_embedded_commas() {
        let got = parse_purpose_list("App functionality, Fraud prevention, security, and compliance, Analytics")
            .unwrap();
        let keys: Vec<_> = got.iter().map(|p| p.key()).collect();
        assert_eq!(
            keys,
            vec!["app_functionality", "fraud_prevention_security_and_compliance", "analytics"]
        );
        assert_eq!(
            parse_purpose_list("Advertising").unwrap()[0].key(),
            "advertising_or_marketing"
        );
        assert!(parse_purpose_list("App functionality, Mind reading").is_err());
    }

    #[test]
    fn rejects_overlapping_groups() {
        let bad = BUNDLED_TAXONOMY.replace(
            "categories = [\"photos_and_videos\", \"audio_files\", \"files_and_docs\"]",
            "categories = [\"photos_and_videos\", \"audio_files\", \"files_and_docs\", \"location\"]",
        );
        assert!(matches!(
            Taxonomy::from_toml(&bad),
            Err(TaxonomyError::BadScopeGroups(_))
        ));
    }

    #[test]
    fn unknown_id_serde_error_names_it() {
        let err = serde_json::from_str::<DataTypeId>("\"heart_rate\"").unwrap_err();
        assert!(err.to_string().contains("heart_rate"));
    }
}
