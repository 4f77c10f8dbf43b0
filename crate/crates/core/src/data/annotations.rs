use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::{rle_decode, BinaryMask, Rle};
use crate::error::{Error, Result};

/// Category and attribute names plus which attribute ids each category may
/// carry.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
    /// Mutually exclusive attribute id groups (e.g. striped/solid).
    #[serde(default)]
    pub attribute_groups: Vec<Vec<usize>>,
    /// Per category, the sorted attribute ids it may carry.
    pub applicability: Vec<Vec<usize>>,
}

impl Vocabulary {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Whether instances of `category` can have any attributes at all.
    pub fn has_attributes(&self, category: usize) -> bool {
        self.applicability
            .get(category)
            .is_some_and(|a| !a.is_empty())
    }

    fn validate(&self) -> Result<()> {
        let schema = |path: String, reason: String| Error::Schema { path, reason };
        if self.applicability.len() != self.categories.len() {
            return Err(schema(
                "header.applicability".into(),
                format!(
                    "{} rows for {} categories",
                    self.applicability.len(),
                    self.categories.len()
                ),
            ));
        }
        let a = self.attributes.len();
        for (c, row) in self.applicability.iter().enumerate() {
            for (k, &id) in row.iter().enumerate() {
                if id >= a {
                    return Err(schema(
                        format!("header.applicability[{c}][{k}]"),
                        format!("attribute id {id} out of range 0..{a}"),
                    ));
                }
            }
        }
        for (g, group) in self.attribute_groups.iter().enumerate() {
            for (k, &id) in group.iter().enumerate() {
                if id >= a {
                    return Err(schema(
                        format!("header.attribute_groups[{g}][{k}]"),
                        format!("attribute id {id} out of range 0..{a}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceAnnotation {
    pub image_id: u64,
    pub category: usize,
    /// Sorted, duplicate-free attribute ids.
    pub attributes: Vec<usize>,
    pub rle: Rle,
}

/// One split: vocabulary header, image list and instance list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub header: Vocabulary,
    pub images: Vec<ImageRecord>,
    pub instances: Vec<InstanceAnnotation>,
}

impl Dataset {
    /// Parses and validates a dataset document. Blank input is an empty dataset.
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let dataset: Dataset = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Checks ids, applicability and mask extents.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let schema = |path: String, reason: String| Error::Schema { path, reason };
        let mut extents = HashMap::new();
        for (i, img) in self.images.iter().enumerate() {
            if img.h == 0 || img.w == 0 {
                return Err(schema(
                    format!("images[{i}]"),
                    format!("image {} has zero extent", img.id),
                ));
            }
            if extents.insert(img.id, (img.h, img.w)).is_some() {
                return Err(schema(
                    format!("images[{i}].id"),
                    format!("duplicate image id {}", img.id),
                ));
            }
        }
        let (c, a) = (self.header.num_categories(), self.header.num_attributes());
        for (i, inst) in self.instances.iter().enumerate() {
            let &(h, w) = extents.get(&inst.image_id).ok_or_else(|| {
                schema(
                    format!("instances[{i}].image_id"),
                    format!("instance {i}: unknown image id {}", inst.image_id),
                )
            })?;
            if inst.category >= c {
                return Err(schema(
                    format!("instances[{i}].category"),
                    format!(
                        "instance {i}: unknown category id {} (have {c})",
                        inst.category
                    ),
                ));
            }
            for (k, &id) in inst.attributes.iter().enumerate() {
                let path = format!("instances[{i}].attributes[{k}]");
                if id >= a {
                    return Err(schema(
                        path,
                        format!("instance {i}: unknown attribute id {id} (have {a})"),
                    ));
                }
                if !self.header.applicability[inst.category].contains(&id) {
                    return Err(schema(
                        path,
                        format!(
                            "instance {i}: attribute {id} not applicable to category {}",
                            inst.category
                        ),
                    ));
                }
                if k > 0 && inst.attributes[k - 1] >= id {
                    return Err(schema(
                        path,
                        format!("instance {i}: attribute ids must be sorted and unique"),
                    ));
                }
            }
            let mask = rle_decode(&inst.rle, h, w)
                .map_err(|e| schema(format!("instances[{i}].rle"), format!("instance {i}: {e}")))?;
            if mask.is_empty() {
                return Err(schema(
                    format!("instances[{i}].rle"),
                    format!("instance {i}: empty mask"),
                ));
            }
        }
        Ok(())
    }

    /// Instance indices per image, in image-list order.
    pub fn instances_by_image(&self) -> Vec<Vec<usize>> {
        let index: HashMap<u64, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i))
            .collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for (k, inst) in self.instances.iter().enumerate() {
            out[index[&inst.image_id]].push(k);
        }
        out
    }

    /// Decoded full-resolution mask of instance `k`.
    pub fn mask(&self, k: usize) -> Result<BinaryMask> {
        let inst = &self.instances[k];
        let img = self
            .images
            .iter()
            .find(|r| r.id == inst.image_id)
            .ok_or_else(|| Error::Data(format!("unknown image id {}", inst.image_id)))?;
        rle_decode(&inst.rle, img.h, img.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::rle_encode;

    fn tiny() -> Dataset {
        let mut m = BinaryMask::new(2, 3);
        m.set(1, 2, true);
        Dataset {
            header: Vocabulary {
                categories: vec!["a".into(), "b".into()],
                attributes: vec!["x".into(), "y".into()],
                attribute_groups: vec![vec![0, 1]],
                applicability: vec![vec![0, 1], vec![]],
            },
            images: vec![ImageRecord {
                id: 7,
                file: "7.png".into(),
                h: 2,
                w: 3,
            }],
            instances: vec![InstanceAnnotation {
                image_id: 7,
                category: 0,
                attributes: vec![1],
                rle: rle_encode(&m),
            }],
        }
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        assert_eq!(Dataset::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn blank_is_empty() {
        assert_eq!(Dataset::from_json("  \n").unwrap(), Dataset::default());
    }

    #[test]
    fn unknown_attribute_names_instance() {
        let mut d = tiny();
        d.instances[0].attributes = vec![5];
        let err = Dataset::from_json(&d.to_json()).unwrap_err().to_string();
        assert!(err.contains("instances[0].attributes[0]"), "{err}");
        assert!(err.contains("instance 0"), "{err}");
    }

    #[test]
    fn inapplicable_attribute_rejected() {
        let mut d = tiny();
        d.instances[0].category = 1;
        assert!(Dataset::from_json(&d.to_json()).is_err());
    }

    #[test]
    fn type_errors_carry_json_path() {
        let text = tiny()
            .to_json()
            .replace("\"category\": 0", "\"category\": \"zero\"");
        match Dataset::from_json(&text).unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "instances[0].category"),
            other => panic!("unexpected {other}"),
        }
    }
}
