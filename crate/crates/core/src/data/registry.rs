use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abnormality names in the order used by the public chest CT label set.
pub const CT_RATE_LABELS: [&str; 18] = [
    "Medical material",
    "Arterial wall calcification",
    "Cardiomegaly",
    "Pericardial effusion",
    "Coronary artery wall calcification",
    "Hiatal hernia",
    "Lymphadenopathy",
    "Emphysema",
    "Atelectasis",
    "Lung nodule",
    "Lung opacity",
    "Pulmonary fibrotic sequela",
    "Pleural effusion",
    "Mosaic attenuation pattern",
    "Peribronchial thickening",
    "Consolidation",
    "Bronchiectasis",
    "Interlobular septal thickening",
];

/// Sentence template per known label. `{size}` and `{loc}` are slot fills and
/// `{name}` is the anchor phrase (the lowercased label name).
const TEMPLATES: [(&str, &str); 18] = [
    ("Medical material", "There is {size} {name} in the {loc} chest."),
    ("Arterial wall calcification", "A {size} focus of {name} is seen in the {loc} region."),
    ("Cardiomegaly", "{Name} of {size} degree is noted toward the {loc} mediastinum."),
    ("Pericardial effusion", "A {size} {name} is present along the {loc} aspect."),
    ("Coronary artery wall calcification", "There is {size} {name} in the {loc} heart."),
    ("Hiatal hernia", "A {size} {name} is observed in the {loc} region."),
    ("Lymphadenopathy", "{Size} {name} is seen in the {loc} station."),
    ("Emphysema", "{Size} {name} is present in the {loc} lung."),
    ("Atelectasis", "There is {size} {name} in the {loc} lung."),
    ("Lung nodule", "A {size} {name} is seen in the {loc} lung."),
    ("Lung opacity", "A {size} {name} is noted in the {loc} lung."),
    ("Pulmonary fibrotic sequela", "{Size} {name} is seen in the {loc} lung."),
    ("Pleural effusion", "A {size} {name} is present in the {loc} hemithorax."),
    ("Mosaic attenuation pattern", "A {size} {name} is seen in the {loc} lung."),
    ("Peribronchial thickening", "There is {size} {name} in the {loc} lung."),
    ("Consolidation", "A {size} {name} is noted in the {loc} lung."),
    ("Bronchiectasis", "{Size} {name} is seen in the {loc} lung."),
    ("Interlobular septal thickening", "There is {size} {name} in the {loc} lung."),
];

const FALLBACK_TEMPLATE: &str = "There is {size} {name} in the {loc} region.";

/// Ordered abnormality names; index `i` is label `i` everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    names: Vec<String>,
}

impl LabelRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("label registry is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Config("blank label name".into()));
            }
            let lower = n.to_lowercase();
            if names[..i].iter().any(|m| m.to_lowercase() == lower) {
                return Err(Error::Config(format!("duplicate label name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// The first `k` public chest CT labels.
    pub fn ct_rate(k: usize) -> Result<Self> {
        if k == 0 || k > CT_RATE_LABELS.len() {
            return Err(Error::Config(format!("K must be in 1..=18, got {k}")));
        }
        Self::new(CT_RATE_LABELS[..k].iter().copied())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Lowercased anchor phrase that marks label `i` in report text.
    pub fn anchor(&self, i: usize) -> String {
        self.names[i].to_lowercase()
    }

    pub(crate) fn template(&self, i: usize) -> &'static str {
        TEMPLATES
            .iter()
            .find(|(n, _)| *n == self.names[i])
            .map_or(FALLBACK_TEMPLATE, |(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let r = LabelRegistry::ct_rate(6).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(r.name(1), "Arterial wall calcification");
        assert!(LabelRegistry::ct_rate(0).is_err());
        assert!(LabelRegistry::ct_rate(19).is_err());
        assert!(LabelRegistry::new(["a", "A"]).is_err());
        assert!(LabelRegistry::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn every_template_carries_its_anchor_slot() {
        for (name, t) in TEMPLATES {
            assert!(CT_RATE_LABELS.contains(&name));
            assert!(t.contains("{name}") || t.contains("{Name}"));
            assert!(t.contains("{loc}"));
            assert!(t.ends_with('.'));
        }
    }
}
