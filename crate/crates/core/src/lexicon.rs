//! Grapheme-to-phoneme conversion, pronunciation lexicons and phone class maps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub type Phone = String;

/// Ordered grapheme rules for a language with a phonemic orthography.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphemeMap {
    pub language_id: String,
    rules: Vec<(String, Vec<Phone>)>,
    inventory: BTreeSet<Phone>,
}

impl GraphemeMap {
    pub fn new(language_id: impl Into<String>, rules: Vec<(String, Vec<Phone>)>) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::GraphemeMap("at least one rule is required".into()));
        }
        let mut seen = BTreeSet::new();
        for (g, phones) in &rules {
            if g.is_empty() {
                return Err(Error::GraphemeMap("empty grapheme".into()));
            }
            if !seen.insert(g.clone()) {
                return Err(Error::GraphemeMap(format!("grapheme {g:?} listed twice")));
            }
            if phones.is_empty() {
                return Err(Error::GraphemeMap(format!("grapheme {g:?} maps to no phones")));
            }
        }
        let inventory = rules.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
        Ok(Self {
            language_id: language_id.into(),
            rules,
            inventory,
        })
    }

    /// Parse "grapheme TAB phone [phone...]" lines; `#` starts a comment.
    pub fn parse(language_id: &str, text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let (g, phones) = line
                .split_once('\t')
                .ok_or_else(|| Error::GraphemeMap(format!("line {}: expected a tab", n + 1)))?;
            rules.push((
                g.trim().to_owned(),
                phones.split_whitespace().map(str::to_owned).collect(),
            ));
        }
        Self::new(language_id, rules)
    }

    pub fn load(language_id: &str, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(language_id, &text)
    }

    pub fn rules(&self) -> &[(String, Vec<Phone>)] {
        &self.rules
    }

    pub fn inventory(&self) -> &BTreeSet<Phone> {
        &self.inventory
    }
}

/// Greedy longest-match-first segmentation, left to right.
pub fn apply_g2p(word: &str, map: &GraphemeMap) -> Result<Vec<Phone>> {
    let mut phones = Vec::new();
    let mut pos = 0;
    while pos < word.len() {
        let rest = &word[pos..];
        let best = map
            .rules
            .iter()
            .filter(|(g, _)| rest.starts_with(g.as_str()))
            .max_by_key(|(g, _)| g.len());
        match best {
            Some((g, p)) => {
                phones.extend(p.iter().cloned());
                pos += g.len();
            }
            None => {
                return Err(Error::Unmappable {
                    word: word.to_owned(),
                    position: pos,
                    remaining: rest.to_owned(),
                })
            }
        }
    }
    if phones.is_empty() {
        return Err(Error::Unmappable {
            word: word.to_owned(),
            position: 0,
            remaining: String::new(),
        });
    }
    Ok(phones)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Vec<Phone>>>,
    inventory: BTreeSet<Phone>,
}

impl Lexicon {
    pub fn insert(&mut self, word: &str, pron: Vec<Phone>) {
        self.inventory.extend(pron.iter().cloned());
        let prons = self.entries.entry(word.to_owned()).or_default();
        if !prons.contains(&pron) {
            prons.push(pron);
            prons.sort();
        }
    }

    pub fn get(&self, word: &str) -> Option<&[Vec<Phone>]> {
        self.entries
            .get(word)
            .or_else(|| self.entries.get(&word.to_lowercase()))
            .map(Vec::as_slice)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<Vec<Phone>>> {
        &self.entries
    }

    pub fn inventory(&self) -> &BTreeSet<Phone> {
        &self.inventory
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// "word TAB phone phone ..." per pronunciation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (word, prons) in &self.entries {
            for p in prons {
                let _ = writeln!(out, "{word}\t{}", p.join(" "));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidParameter(format!("lexicon line {}: expected a tab", n + 1))
            })?;
            let pron: Vec<Phone> = pron.split_whitespace().map(str::to_owned).collect();
            if pron.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "lexicon line {}: empty pronunciation",
                    n + 1
                )));
            }
            lex.insert(word.trim(), pron);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text)
    }
}

/// One lexicon over every word type in every corpus. Words are lowercased
/// before lookup; all unmappable words are collected before failing.
pub fn compile_lexicon(corpora: &[Corpus], maps: &HashMap<String, GraphemeMap>) -> Result<Lexicon> {
    let mut types: BTreeSet<(String, String)> = BTreeSet::new();
    for corpus in corpora {
        for utt in &corpus.utterances {
            for w in utt.words() {
                types.insert((utt.language_id.clone(), w.to_lowercase()));
            }
        }
    }
    let mut lex = Lexicon::default();
    let mut failures = Vec::new();
    for (lang, word) in &types {
        let Some(map) = maps.get(lang) else {
            return Err(Error::GraphemeMap(format!("no grapheme map for language {lang:?}")));
        };
        match apply_g2p(word, map) {
            Ok(pron) => lex.insert(word, pron),
            Err(e) => failures.push(format!("{word} ({lang}): {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::LexiconFailures(failures));
    }
    Ok(lex)
}

/// Partition of the phone inventory used as triphone context classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneClassMap {
    pub name: String,
    mapping: BTreeMap<Phone, usize>,
    class_names: Vec<String>,
}

impl PhoneClassMap {
    pub fn class_of(&self, phone: &str) -> Option<usize> {
        self.mapping.get(phone).copied()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn mapping(&self) -> &BTreeMap<Phone, usize> {
        &self.mapping
    }

    pub fn parse(name: &str, text: &str, inventory: &BTreeSet<Phone>) -> Result<Self> {
        let mut mapping = BTreeMap::new();
        let mut class_names = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            if line.trim().is_empty() {
                continue;
            }
            let (class, phones) = line.split_once(':').ok_or_else(|| {
                Error::ClassMap(format!("line {}: expected \"class: phones\"", n + 1))
            })?;
            let class = class.trim().to_owned();
            if class_names.contains(&class) {
                return Err(Error::ClassMap(format!("class {class:?} declared twice")));
            }
            let id = class_names.len();
            class_names.push(class);
            for phone in phones.split_whitespace() {
                if !inventory.contains(phone) {
                    return Err(Error::ClassMap(format!("unknown phone {phone:?}")));
                }
                if mapping.insert(phone.to_owned(), id).is_some() {
                    return Err(Error::ClassMap(format!("phone {phone:?} listed twice")));
                }
            }
        }
        if let Some(missing) = inventory.iter().find(|p| !mapping.contains_key(*p)) {
            return Err(Error::ClassMap(format!("phone {missing:?} is not assigned a class")));
        }
        let used: BTreeSet<usize> = mapping.values().copied().collect();
        if let Some(empty) = (0..class_names.len()).find(|c| !used.contains(c)) {
            return Err(Error::ClassMap(format!("class {:?} has no phones", class_names[empty])));
        }
        Ok(Self {
            name: name.to_owned(),
            mapping,
            class_names,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, class) in self.class_names.iter().enumerate() {
            let phones: Vec<&str> = self
                .mapping
                .iter()
                .filter(|(_, &c)| c == id)
                .map(|(p, _)| p.as_str())
                .collect();
            let _ = writeln!(out, "{class}: {}", phones.join(" "));
        }
        out
    }
}

pub fn load_phone_class_map(path: &Path, inventory: &BTreeSet<Phone>) -> Result<PhoneClassMap> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PhoneClassMap::parse(&name, &text, inventory)
}

/// Every phone in its own class.
pub fn default_identity_classes(inventory: &BTreeSet<Phone>) -> Result<PhoneClassMap> {
    if inventory.is_empty() {
        return Err(Error::ClassMap("empty inventory".into()));
    }
    let class_names: Vec<String> = inventory.iter().cloned().collect();
    let mapping = inventory.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
    Ok(PhoneClassMap {
        name: "identity".into(),
        mapping,
        class_names,
    })
}

pub const OTHER_CLASS: &str = "other";

/// Phone → natural class label, used to aggregate boundary errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaturalClassMap {
    classes: Vec<String>,
    mapping: BTreeMap<Phone, String>,
}

impl NaturalClassMap {
    /// Classes appear in file order; `other` is always present and last.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes: Vec<String> = Vec::new();
        let mut mapping = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            if line.trim().is_empty() {
                continue;
            }
            let (class, phones) = line.split_once(':').ok_or_else(|| {
                Error::ClassMap(format!("line {}: expected \"class: phones\"", n + 1))
            })?;
            let class = class.trim().to_owned();
            if !classes.contains(&class) {
                classes.push(class.clone());
            }
            for p in phones.split_whitespace() {
                if mapping.insert(p.to_owned(), class.clone()).is_some() {
                    return Err(Error::ClassMap(format!("phone {p:?} listed twice")));
                }
            }
        }
        Ok(Self::from_parts(classes, mapping))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text)
    }

    fn from_parts(mut classes: Vec<String>, mapping: BTreeMap<Phone, String>) -> Self {
        classes.retain(|c| c != OTHER_CLASS);
        classes.push(OTHER_CLASS.into());
        Self { classes, mapping }
    }

    /// Classify IPA symbols by their base character. Length-marked vowels are `long_vowel`.
    pub fn from_ipa(inventory: &BTreeSet<Phone>) -> Self {
        let order = [
            "vowel",
            "long_vowel",
            "stop",
            "nasal",
            "lateral",
            "rhotic",
            "trill",
            "approximant",
        ];
        let mapping = inventory
            .iter()
            .map(|p| (p.clone(), ipa_natural_class(p).to_owned()))
            .collect();
        Self::from_parts(order.iter().map(|s| s.to_string()).collect(), mapping)
    }

    pub fn class_of(&self, phone: &str) -> Option<&str> {
        self.mapping.get(phone).map(String::as_str)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for class in &self.classes {
            let phones: Vec<&str> = self
                .mapping
                .iter()
                .filter(|(_, c)| *c == class)
                .map(|(p, _)| p.as_str())
                .collect();
            if !phones.is_empty() {
                let _ = writeln!(out, "{class}: {}", phones.join(" "));
            }
        }
        out
    }
}

fn ipa_natural_class(phone: &str) -> &'static str {
    const VOWELS: &str = "aeiouyæɑɐɒɔəɛɜɨɪʉʊʌɯɤøœɵ";
    const STOPS: &str = "pbtdkgqʔʈɖcɟɡ";
    const NASALS: &str = "mnŋɲɳɱɴ";
    const LATERALS: &str = "lɭʎɫʟ";
    const RHOTICS: &str = "ɹɻɽɾ";
    const APPROXIMANTS: &str = "wjɰʋ";
    let Some(base) = phone.chars().next() else {
        return OTHER_CLASS;
    };
    if VOWELS.contains(base) {
        if phone.contains('ː') || phone.chars().filter(|c| VOWELS.contains(*c)).count() > 1 {
            "long_vowel"
        } else {
            "vowel"
        }
    } else if STOPS.contains(base) {
        "stop"
    } else if NASALS.contains(base) {
        "nasal"
    } else if LATERALS.contains(base) {
        "lateral"
    } else if base == 'r' || base == 'ʀ' {
        "trill"
    } else if RHOTICS.contains(base) {
        "rhotic"
    } else if APPROXIMANTS.contains(base) {
        "approximant"
    } else {
        OTHER_CLASS
    }
}
