use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::Deserialize;

use super::{Role, Strategy, Template, TemplateError};

/// Bundled prompt-family pools, see `data/template_families.toml` for the schema.
pub const BUNDLED_FAMILIES: &str = include_str!("../../data/template_families.toml");

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    pub instructions: Vec<String>,
    pub objects: Vec<String>,
    pub marks: Vec<String>,
    pub separators: Vec<String>,
    #[serde(default)]
    pub prefixes: Vec<String>,
    #[serde(default)]
    pub prefix_pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub connectors: BTreeMap<String, String>,
    #[serde(default)]
    pub one_word: Vec<String>,
    #[serde(default)]
    pub closings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CaseStyle {
    Plain,
    Upper,
    Title,
}

impl CaseStyle {
    fn apply(self, s: &str) -> String {
        match self {
            CaseStyle::Plain => s.to_owned(),
            CaseStyle::Upper => s.to_uppercase(),
            CaseStyle::Title => s
                .split(' ')
                .map(|w| {
                    let mut c = w.chars();
                    match c.next() {
                        Some(f) => f.to_uppercase().chain(c).collect(),
                        None => String::new(),
                    }
                })
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Parsed template-family config.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateFamilies {
    case_styles: Vec<CaseStyle>,
    classical: Family,
    echo: Family,
    summarization: Family,
}

impl TemplateFamilies {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_FAMILIES).expect("bundled template families are valid")
    }

    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let families: TemplateFamilies = toml::from_str(source).map_err(|e| TemplateError::Config(e.to_string()))?;
        families.check()?;
        Ok(families)
    }

    pub fn family(&self, strategy: Strategy) -> &Family {
        match strategy {
            Strategy::Classical => &self.classical,
            Strategy::Echo => &self.echo,
            Strategy::Summarization => &self.summarization,
        }
    }

    fn check(&self) -> Result<(), TemplateError> {
        let err = |m: String| Err(TemplateError::Config(m));
        if self.case_styles.is_empty() {
            return err("case_styles is empty".into());
        }
        for strategy in Strategy::ALL {
            let f = self.family(strategy);
            let mut required: Vec<(&str, usize)> = vec![
                ("instructions", f.instructions.len()),
                ("objects", f.objects.len()),
                ("marks", f.marks.len()),
                ("separators", f.separators.len()),
            ];
            match strategy {
                Strategy::Echo => required.push(("prefix_pairs", f.prefix_pairs.len())),
                Strategy::Classical => required.push(("prefixes", f.prefixes.len())),
                Strategy::Summarization => {
                    required.push(("prefixes", f.prefixes.len()));
                    required.push(("one_word", f.one_word.len()));
                    required.push(("closings", f.closings.len()));
                }
            }
            if let Some((name, _)) = required.iter().find(|(_, n)| *n == 0) {
                return err(format!("[{strategy}] {name} is empty"));
            }
            let pieces = f
                .instructions
                .iter()
                .chain(&f.objects)
                .chain(&f.marks)
                .chain(&f.separators)
                .chain(&f.prefixes)
                .chain(f.prefix_pairs.iter().flatten())
                .chain(f.connectors.values())
                .chain(&f.one_word)
                .chain(&f.closings);
            for p in pieces {
                if p.contains('{') || p.contains('}') {
                    return err(format!("[{strategy}] pool entry {p:?} contains a brace"));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, strategy: Strategy, rng: &mut Xoshiro256StarStar) -> Template {
        fn pick<'a, T>(rng: &mut Xoshiro256StarStar, pool: &'a [T]) -> &'a T {
            &pool[rng.random_range(0..pool.len())]
        }
        let f = self.family(strategy);
        let instruction = pick(rng, &f.instructions);
        let object = pick(rng, &f.objects);
        let case = *pick(rng, &self.case_styles);
        let mark = pick(rng, &f.marks);
        let separator = pick(rng, &f.separators).clone();
        let raw = match f.connectors.get(instruction) {
            Some(conn) => format!("{instruction} {conn} {object}"),
            None => format!("{instruction} {object}"),
        };
        let wording = case.apply(&raw);
        let head = format!("{wording}{mark}{separator}");

        let mut template = Template {
            strategy,
            role: Role::QueryOrSymmetric,
            instruction_verb: instruction.clone(),
            wording,
            separator: separator.clone(),
            prefix_first: String::new(),
            prefix_second: String::new(),
            suffix: String::new(),
            task_instruction: None,
            pattern: String::new(),
        };
        template.pattern = match strategy {
            Strategy::Classical => {
                template.prefix_first = pick(rng, &f.prefixes).clone();
                format!("{head}{}{{S}}", template.prefix_first)
            }
            Strategy::Echo => {
                let [p0, p1] = pick(rng, &f.prefix_pairs).clone();
                let pattern = format!("{head}{p0}{{S}}{separator}{p1}{{S}}");
                template.prefix_first = p0;
                template.prefix_second = p1;
                pattern
            }
            Strategy::Summarization => {
                template.prefix_first = pick(rng, &f.prefixes).clone();
                let one_word = pick(rng, &f.one_word);
                let suffix_case = *pick(rng, &self.case_styles);
                let closing = pick(rng, &f.closings);
                template.suffix = suffix_case.apply(one_word);
                format!("{head}{}{{S}} {}{closing}", template.prefix_first, template.suffix)
            }
        };
        template
    }
}

/// Draws `count` templates from the bundled families.
pub fn sample_templates(strategy: Strategy, count: usize, seed: u64) -> Vec<Template> {
    sample_templates_with(&TemplateFamilies::bundled(), strategy, count, seed)
}

/// Draws `count` templates; the i-th template depends only on `seed` and `i`,
/// so a longer sample extends a shorter one.
pub fn sample_templates_with(families: &TemplateFamilies, strategy: Strategy, count: usize, seed: u64) -> Vec<Template> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    (0..count).map(|_| families.draw(strategy, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templating::render;

    #[test]
    fn deterministic_per_seed() {
        let a = sample_templates(Strategy::Classical, 12, 7);
        let b = sample_templates(Strategy::Classical, 12, 7);
        assert_eq!(a, b);
        let c = sample_templates(Strategy::Classical, 12, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn longer_sample_extends_shorter() {
        let short = sample_templates(Strategy::Echo, 5, 3);
        let long = sample_templates(Strategy::Echo, 9, 3);
        assert_eq!(short[..], long[..5]);
    }

    #[test]
    fn every_strategy_samples_valid_templates() {
        for strategy in Strategy::ALL {
            for t in sample_templates(strategy, 200, 11) {
                t.validate().unwrap();
                let r = render(&t, "the cat sat").unwrap();
                r.check_invariants().unwrap();
            }
        }
    }

    #[test]
    fn echo_sample_has_two_placeholders() {
        for seed in 0..20 {
            let t = &sample_templates(Strategy::Echo, 1, seed)[0];
            assert_eq!(t.pattern.matches("{S}").count(), 2);
        }
    }

    #[test]
    fn summarization_suffix_is_a_one_word_wording() {
        let pool = ["in one word", "with a single word", "succinctly with one word", "in a unique one-word way", "in a single word", "in a word"];
        for seed in 0..50 {
            let t = &sample_templates(Strategy::Summarization, 1, seed)[0];
            assert!(pool.iter().any(|w| w.eq_ignore_ascii_case(&t.suffix)), "{:?}", t.suffix);
            assert!(t.pattern.contains(&format!("{{S}} {}", t.suffix)));
        }
    }

    #[test]
    fn instructions_come_from_the_strategy_pool() {
        let allowed = |s: Strategy| -> &'static [&'static str] {
            match s {
                Strategy::Classical => &["Write", "Say", "Complete", "Explain"],
                Strategy::Echo => &["Repeat", "Rewrite", "Rephrase", "Fill in the blank"],
                Strategy::Summarization => &["Summarize", "Categorize", "Understand", "Analyze"],
            }
        };
        for strategy in Strategy::ALL {
            for t in sample_templates(strategy, 100, 5) {
                assert!(allowed(strategy).contains(&t.instruction_verb.as_str()));
                assert!(t.wording.to_lowercase().starts_with(&t.instruction_verb.to_lowercase()));
            }
        }
    }

    #[test]
    fn config_errors() {
        assert!(matches!(TemplateFamilies::parse("case_styles = []"), Err(TemplateError::Config(_))));
        let bad = BUNDLED_FAMILIES.replace("\"PROMPT-\"", "\"{S}\"");
        assert!(matches!(TemplateFamilies::parse(&bad), Err(TemplateError::Config(m)) if m.contains("brace")));
    }
}
