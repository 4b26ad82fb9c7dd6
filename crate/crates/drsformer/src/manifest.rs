//! Dataset manifests: one `split\trainy\tclean` line per pair, paths relative
//! to the manifest's directory. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use drsformer_core::augment::Pair;

use crate::error::{invalid, read, write, Error, Result};
use crate::imageio::load_image;

pub const FILE_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub split: Split,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

impl Entry {
    /// File stem of the rainy image, used to name restored outputs.
    pub fn name(&self) -> String {
        self.rainy
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub seed: Option<u64>,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut seed = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(s) = comment.trim().strip_prefix("seed ") {
                    seed = s.trim().parse().ok();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = |why: &str| invalid(format!("manifest line {}: {why}: {line:?}", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, rainy, clean] = fields[..] else {
                return Err(bad("expected split<TAB>rainy<TAB>clean"));
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split must be train or test")),
            };
            if rainy.is_empty() || clean.is_empty() {
                return Err(bad("empty path"));
            }
            entries.push(Entry {
                split,
                rainy: rainy.into(),
                clean: clean.into(),
            });
        }
        Ok(Self { root, seed, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            String::from_utf8(read(path)?).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// Accepts either a manifest file or a directory containing one.
    pub fn locate(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(FILE_NAME))
        } else {
            Self::load(path)
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(s) = self.seed {
            writeln!(out, "# seed {s}").unwrap();
        }
        for e in &self.entries {
            writeln!(
                out,
                "{}\t{}\t{}",
                e.split.as_str(),
                e.rainy.display(),
                e.clean.display()
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, self.render().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Decodes the pairs of one split, checking that both images agree in size.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<(String, Pair)>> {
        self.split(split)
            .map(|e| {
                let rainy_path = self.root.join(&e.rainy);
                let rainy = load_image(&rainy_path)?;
                let clean = load_image(&self.root.join(&e.clean))?;
                if !rainy.same_size(&clean) {
                    return Err(Error::format(
                        &rainy_path,
                        format!(
                            "rainy {}x{} and clean {}x{} differ in size",
                            rainy.width(),
                            rainy.height(),
                            clean.width(),
                            clean.height()
                        ),
                    ));
                }
                Ok((e.name(), Pair::new(rainy.into_tensor(), clean.into_tensor())?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# seed 7\ntrain\trainy/0.ppm\tclean/0.ppm\n\ntest\trainy/1.ppm\tclean/1.ppm\n";
        let m = Manifest::parse(text, PathBuf::new()).unwrap();
        assert_eq!(m.seed, Some(7));
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.split(Split::Test).next().unwrap().name(), "1");
        assert_eq!(m.render(), text.replace("\n\n", "\n"));
    }

    #[test]
    fn bad_lines_name_their_number() {
        for (text, line) in [
            ("train\ta\tb\nvalid\ta\tb\n", 2),
            ("train\ta\n", 1),
            ("test\ta\tb\ttrailing\n", 1),
            ("# c\ntrain\t\tb\n", 2),
        ] {
            let err = Manifest::parse(text, PathBuf::new()).unwrap_err().to_string();
            assert!(err.contains(&format!("line {line}")), "{err}");
        }
    }
}
