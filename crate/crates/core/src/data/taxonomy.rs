use crate::error::{Result, WssError};

pub const BACKGROUND: usize = 0;

/// Ordered semantic classes. Index 0 is always `background`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
}

impl ClassTaxonomy {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|n| n.as_ref().to_string()).collect();
        if names.len() < 2 {
            return Err(WssError::invalid("taxonomy needs at least 2 classes"));
        }
        if names[0] != "background" {
            return Err(WssError::invalid("class 0 must be `background`"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(WssError::invalid(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(WssError::invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// The 21-class PASCAL VOC 2012 layout.
    pub fn pascal_voc() -> Self {
        Self::new(&[
            "background",
            "aeroplane",
            "bicycle",
            "bird",
            "boat",
            "bottle",
            "bus",
            "car",
            "cat",
            "chair",
            "cow",
            "diningtable",
            "dog",
            "horse",
            "motorbike",
            "person",
            "pottedplant",
            "sheep",
            "sofa",
            "train",
            "tvmonitor",
        ])
        .expect("static taxonomy is valid")
    }

    /// Background plus the three synthetic shape classes.
    pub fn shapes() -> Self {
        Self::new(&["background", "disk", "square", "triangle"]).expect("static taxonomy is valid")
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| WssError::UnknownClass(name.to_string()))
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> {
        1..self.names.len()
    }

    /// Parses a comma-separated list such as `background,shapes`.
    pub fn parse_list(spec: &str) -> Result<Self> {
        let names: Vec<&str> = spec.split(',').map(str::trim).collect();
        Self::new(&names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pascal_has_21_classes() {
        let t = ClassTaxonomy::pascal_voc();
        assert_eq!(t.count(), 21);
        assert_eq!(t.foreground().count(), 20);
        assert_eq!(t.index_of("cow").unwrap(), 10);
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(ClassTaxonomy::new(&["background"]).is_err());
        assert!(ClassTaxonomy::new(&["cat", "background"]).is_err());
        assert!(ClassTaxonomy::new(&["background", "cat", "cat"]).is_err());
        assert!(ClassTaxonomy::new(&["background", ""]).is_err());
    }

    #[test]
    fn unknown_name_is_reported() {
        let err = ClassTaxonomy::pascal_voc().index_of("zebra").unwrap_err();
        assert!(err.to_string().contains("zebra"));
    }
}
