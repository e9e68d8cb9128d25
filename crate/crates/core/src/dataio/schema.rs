use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Item,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Single,
    Multi,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDecl {
    pub name: String,
    pub owner: Owner,
    pub kind: FeatureKind,
    /// Vocabulary size for categorical kinds; ignored for continuous ones.
    #[serde(default)]
    pub vocab: usize,
}

impl FeatureDecl {
    pub fn new(name: &str, owner: Owner, kind: FeatureKind, vocab: usize) -> Self {
        Self {
            name: name.to_string(),
            owner,
            kind,
            vocab,
        }
    }

    /// Rows of this feature's embedding matrix.
    pub fn table_rows(&self) -> usize {
        match self.kind {
            FeatureKind::Continuous => 1,
            _ => self.vocab,
        }
    }
}

/// Ordered feature declarations. Item features come first and the first of
/// them is the item ID; the first user feature is the user ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    features: Vec<FeatureDecl>,
    n_item: usize,
    embedding_dim: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    version: u32,
    feature: Vec<FeatureDecl>,
}

#[derive(Serialize)]
struct SchemaFileOut<'a> {
    version: u32,
    feature: &'a [FeatureDecl],
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDecl>, embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(config_err!("embedding dimension must be >= 1"));
        }
        let n_item = features.iter().take_while(|f| f.owner == Owner::Item).count();
        if features[n_item..].iter().any(|f| f.owner == Owner::Item) {
            return Err(config_err!("item features must precede user features"));
        }
        if n_item == 0 || n_item == features.len() {
            return Err(config_err!("schema needs at least one item and one user feature"));
        }
        for (idx, what) in [(0, "item ID"), (n_item, "user ID")] {
            if features[idx].kind != FeatureKind::Single {
                return Err(config_err!(
                    "{what} feature `{}` must be single-valued",
                    features[idx].name
                ));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(config_err!("duplicate feature name `{}`", f.name));
            }
            if f.kind != FeatureKind::Continuous && f.vocab == 0 {
                return Err(config_err!("categorical feature `{}` needs vocab >= 1", f.name));
            }
            if matches!(f.name.as_str(), "timestamp" | "label") {
                return Err(config_err!("feature name `{}` is reserved", f.name));
            }
        }
        Ok(Self {
            features,
            n_item,
            embedding_dim,
        })
    }

    pub fn parse(text: &str, embedding_dim: usize) -> Result<Self> {
        let file: SchemaFile =
            toml::from_str(text).map_err(|e| config_err!("schema: {}", e.message()))?;
        if file.version != SCHEMA_VERSION {
            return Err(config_err!("schema version {} unsupported", file.version));
        }
        Self::new(file.feature, embedding_dim)
    }

    pub fn load(path: &Path, embedding_dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, embedding_dim)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&SchemaFileOut {
            version: SCHEMA_VERSION,
            feature: &self.features,
        })
        .expect("schema serializes")
    }

    pub fn features(&self) -> &[FeatureDecl] {
        &self.features
    }

    pub fn feature(&self, m: usize) -> &FeatureDecl {
        &self.features[m]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// `N_v`
    pub fn n_item(&self) -> usize {
        self.n_item
    }

    /// `N_u`
    pub fn n_user(&self) -> usize {
        self.features.len() - self.n_item
    }

    /// `N_v + N_u`, the number of graph nodes.
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn item_id_index(&self) -> usize {
        0
    }

    pub fn user_id_index(&self) -> usize {
        self.n_item
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
version = 1
[[feature]]
name = "movie"
owner = "item"
kind = "single"
vocab = 10
[[feature]]
name = "genres"
owner = "item"
kind = "multi"
vocab = 5
[[feature]]
name = "user"
owner = "user"
kind = "single"
vocab = 7
[[feature]]
name = "age"
owner = "user"
kind = "continuous"
"#;

    #[test]
    fn parses_and_counts() {
        let s = FeatureSchema::parse(TEXT, 4).unwrap();
        assert_eq!((s.n_item(), s.n_user(), s.n_features()), (2, 2, 4));
        assert_eq!(s.user_id_index(), 2);
        assert_eq!(s.feature(3).table_rows(), 1);
        let again = FeatureSchema::parse(&s.to_toml(), 4).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn rejects_bad_layouts() {
        let bad_order = vec![
            FeatureDecl::new("u", Owner::User, FeatureKind::Single, 3),
            FeatureDecl::new("i", Owner::Item, FeatureKind::Single, 3),
        ];
        assert!(FeatureSchema::new(bad_order, 4).is_err());
        let no_user = vec![FeatureDecl::new("i", Owner::Item, FeatureKind::Single, 3)];
        assert!(FeatureSchema::new(no_user, 4).is_err());
        let cont_id = vec![
            FeatureDecl::new("i", Owner::Item, FeatureKind::Continuous, 0),
            FeatureDecl::new("u", Owner::User, FeatureKind::Single, 3),
        ];
        assert!(FeatureSchema::new(cont_id, 4).is_err());
        assert!(FeatureSchema::parse("version = 2\nfeature = []", 4).is_err());
        assert!(FeatureSchema::parse(&TEXT.replace("vocab = 7", "vocab = 7\nextra = 1"), 4).is_err());
    }
}
