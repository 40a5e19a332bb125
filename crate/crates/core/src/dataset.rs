//! Synthetic closed-world knowledge base, pretraining corpus, and edit
//! streams with controlled semantic chaining.
//!
//! The world is a functional fact table over single-token entities and
//! relations. Three fixed relation roles give the chaining structure:
//! relation 0 is the systematic partner pairing (every entity has one),
//! relation 1 is the chain base ("who holds the role"), and relation 2 is the
//! chain dependent ("the partner of whoever holds the role"). A chained edit
//! pair rewrites the dependent fact first and the base fact right after it,
//! with targets kept consistent: the dependent target is the partner of the
//! base target, so queue self-correction re-derives it.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editor::{EditSample, KeyPrompt, LocalityProbe, RephrasePrompt};
use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PARTNER_REL: usize = 0;
pub const CHAIN_BASE_REL: usize = 1;
pub const CHAIN_DEP_REL: usize = 2;

/// Relations above the partner relation come in (base, dependent) pairs:
/// an odd index is a base relation, the next index is its dependent twin.
pub fn is_base_relation(r: usize) -> bool {
    r >= 1 && r % 2 == 1
}

/// Dependent twin of a base relation.
pub fn dep_relation_of(base: usize) -> usize {
    base + 1
}

const GLUE_WORDS: [&str; 6] = ["the", "of", "is", "'s", "for", "a"];

/// Word-level closed vocabulary: glue words, then entities, then relations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn new(words: Vec<String>) -> Self {
        let index = words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
        Vocab { words, index }
    }

    fn rebuild_index(&mut self) {
        self.index =
            self.words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn token(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word {word:?} not in vocabulary")))
    }

    /// Whitespace word-level tokenization.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.token(w)).collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

/// One stored fact `(subject, relation, object)` as indices into the world's
/// entity and relation lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// A prompt template; `{s}` and `{r}` mark the subject and relation slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub words: Vec<String>,
}

// Templates end with the subject: the answer is read at the subject's final
// token, which keeps the fact lookup in the subject position's FFN stack.
fn default_templates() -> Vec<Template> {
    let mk = |ws: &[&str]| Template { words: ws.iter().map(|s| s.to_string()).collect() };
    vec![
        mk(&["the", "{r}", "of", "{s}"]),
        mk(&["{r}", "'s", "{s}"]),
        mk(&["for", "the", "{r}", "a", "{s}"]),
    ]
}

/// A rendered prompt with exact token spans.
#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub subject_span: (usize, usize),
    pub relation_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub facts: Vec<Fact>,
    pub templates: Vec<Template>,
    pub seed: u64,
    pub vocab: Vocab,
}

impl SyntheticWorld {
    pub fn entity_token(&self, entity: usize) -> TokenId {
        GLUE_WORDS.len() + entity
    }

    pub fn relation_token(&self, relation: usize) -> TokenId {
        GLUE_WORDS.len() + self.entities.len() + relation
    }

    /// Partner of an entity under the systematic pairing, if it has one.
    pub fn partner_of(&self, entity: usize) -> Option<usize> {
        let paired = self.entities.len() - (self.entities.len() % 2);
        (entity < paired).then_some(entity ^ 1)
    }

    pub fn object_of(&self, subject: usize, relation: usize) -> Option<usize> {
        self.facts
            .iter()
            .find(|f| f.subject == subject && f.relation == relation)
            .map(|f| f.object)
    }

    /// Render `(subject, relation)` through a template.
    pub fn render(&self, subject: usize, relation: usize, template: usize) -> Result<RenderedPrompt> {
        let tpl = self
            .templates
            .get(template)
            .ok_or_else(|| Error::Config(format!("template {template} out of range")))?;
        let mut words = Vec::with_capacity(tpl.words.len());
        let mut subject_span = None;
        let mut relation_span = None;
        for w in &tpl.words {
            match w.as_str() {
                "{s}" => {
                    subject_span = Some((words.len(), words.len() + 1));
                    words.push(self.entities[subject].clone());
                }
                "{r}" => {
                    relation_span = Some((words.len(), words.len() + 1));
                    words.push(self.relations[relation].clone());
                }
                other => words.push(other.to_string()),
            }
        }
        let text = words.join(" ");
        let tokens = self.vocab.tokenize(&text)?;
        Ok(RenderedPrompt {
            text,
            tokens,
            subject_span: subject_span.ok_or_else(|| Error::Config("template lacks {s}".into()))?,
            relation_span: relation_span.ok_or_else(|| Error::Config("template lacks {r}".into()))?,
        })
    }

    /// `"{subject} is a"` tokens.
    pub fn essence_tokens(&self, subject: usize) -> Vec<TokenId> {
        vec![
            self.entity_token(subject),
            self.vocab.token("is").expect("glue word"),
            self.vocab.token("a").expect("glue word"),
        ]
    }

    /// Every fact rendered through every template, answer token appended:
    /// the pretraining corpus.
    pub fn pretrain_corpus(&self, max_seq: usize) -> Result<Vec<Vec<TokenId>>> {
        let mut out = Vec::with_capacity(self.facts.len() * self.templates.len());
        for fact in &self.facts {
            for t in 0..self.templates.len() {
                let r = self.render(fact.subject, fact.relation, t)?;
                let mut seq = r.tokens;
                seq.push(self.entity_token(fact.object));
                if seq.len() > max_seq {
                    return Err(Error::Config(format!(
                        "rendered fact length {} exceeds max_seq {max_seq}",
                        seq.len()
                    )));
                }
                out.push(seq);
            }
        }
        Ok(out)
    }

    /// `(prompt tokens, answer token)` pairs for greedy evaluation, every
    /// fact through every template.
    pub fn eval_prompts(&self) -> Result<Vec<(Vec<TokenId>, TokenId)>> {
        let mut out = Vec::new();
        for fact in &self.facts {
            for t in 0..self.templates.len() {
                let r = self.render(fact.subject, fact.relation, t)?;
                out.push((r.tokens, self.entity_token(fact.object)));
            }
        }
        Ok(out)
    }

    /// Key-covariance prompts: template-0 renderings with the last subject
    /// token position.
    pub fn key_prompts(&self) -> Result<Vec<KeyPrompt>> {
        self.facts
            .iter()
            .map(|fact| {
                let r = self.render(fact.subject, fact.relation, 0)?;
                Ok(KeyPrompt { tokens: r.tokens, key_pos: r.subject_span.1 - 1 })
            })
            .collect()
    }

    /// Recover the `(subject, relation)` pair of a rendered prompt from its
    /// words. Exact because entities and relations are single distinct words
    /// and glue words never collide with them.
    pub fn identify_fact(&self, prompt: &str) -> Option<(usize, usize)> {
        let mut subject = None;
        let mut relation = None;
        for word in prompt.split_whitespace() {
            if let Ok(tok) = self.vocab.token(word) {
                let ent_base = GLUE_WORDS.len();
                let rel_base = ent_base + self.entities.len();
                if (ent_base..rel_base).contains(&tok) {
                    subject = Some(tok - ent_base);
                } else if tok >= rel_base {
                    relation = Some(tok - rel_base);
                }
            }
        }
        subject.zip(relation)
    }

    /// Chain-eligible slots: `(subject, base relation)` pairs whose dependent
    /// twin fact is consistent with the partner pairing.
    pub fn chain_slots(&self) -> Vec<(usize, usize)> {
        let mut slots: Vec<(usize, usize)> = Vec::new();
        for f in &self.facts {
            if is_base_relation(f.relation) {
                if let (Some(dep_obj), Some(partner)) = (
                    self.object_of(f.subject, dep_relation_of(f.relation)),
                    self.partner_of(f.object),
                ) {
                    if dep_obj == partner {
                        slots.push((f.subject, f.relation));
                    }
                }
            }
        }
        slots.sort_unstable();
        slots
    }
}

/// Deterministic synthetic world.
///
/// Facts are allocated by priority: partner facts for every paired entity,
/// then consistent chain pairs for as many subjects as fit, then random
/// filler facts over the remaining relations.
pub fn generate_world(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_facts: usize,
) -> Result<SyntheticWorld> {
    if n_entities < 4 || n_relations < FILLER_REL_START + 1 {
        return Err(Error::Config(format!(
            "need at least 4 entities and {} relations",
            FILLER_REL_START + 1
        )));
    }
    if n_facts == 0 || n_facts > n_entities * n_relations {
        return Err(Error::Config(format!(
            "n_facts {n_facts} outside 1..={}",
            n_entities * n_relations
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..n_entities).map(|i| format!("e{i}")).collect();
    let relations: Vec<String> = (0..n_relations).map(|i| format!("r{i}")).collect();
    let mut words: Vec<String> = GLUE_WORDS.iter().map(|s| s.to_string()).collect();
    words.extend(entities.iter().cloned());
    words.extend(relations.iter().cloned());
    let vocab = Vocab::new(words);

    let paired = n_entities - (n_entities % 2);
    let mut facts: Vec<Fact> = Vec::with_capacity(n_facts);
    let mut used: HashSet<(usize, usize)> = HashSet::new();

    // Partner facts, both directions within each pair.
    for e in 0..paired {
        if facts.len() >= n_facts {
            break;
        }
        facts.push(Fact { subject: e, relation: PARTNER_REL, object: e ^ 1 });
        used.insert((e, PARTNER_REL));
    }

    // Consistent chain pairs: (s, base, p) and (s, dep, partner(p)).
    let remaining = n_facts.saturating_sub(facts.len());
    let max_chain_subjects = (2 * n_entities) / 5;
    let n_chain = max_chain_subjects.min(remaining / 2);
    let mut subject_order: Vec<usize> = (0..n_entities).collect();
    subject_order.shuffle(&mut rng);
    for &s in subject_order.iter().take(n_chain) {
        let p = loop {
            let cand = rng.gen_range(0..paired);
            if cand != s {
                break cand;
            }
        };
        facts.push(Fact { subject: s, relation: CHAIN_BASE_REL, object: p });
        used.insert((s, CHAIN_BASE_REL));
        facts.push(Fact { subject: s, relation: CHAIN_DEP_REL, object: p ^ 1 });
        used.insert((s, CHAIN_DEP_REL));
    }

    // Filler facts over the remaining relations.
    let mut guard = 0usize;
    while facts.len() < n_facts {
        let s = rng.gen_range(0..n_entities);
        let r = rng.gen_range(FILLER_REL_START..n_relations);
        if used.insert((s, r)) {
            let o = loop {
                let cand = rng.gen_range(0..n_entities);
                if cand != s {
                    break cand;
                }
            };
            facts.push(Fact { subject: s, relation: r, object: o });
        }
        guard += 1;
        if guard > 100 * n_facts + 10_000 {
            return Err(Error::Config(
                "cannot place requested fact count; grow entities or relations".into(),
            ));
        }
    }

    Ok(SyntheticWorld {
        entities,
        relations,
        facts,
        templates: default_templates(),
        seed,
        vocab,
    })
}

/// JSONL record, one per line of a stream file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub old_object: String,
    pub new_object: String,
    pub prompt: String,
    pub subject_span: [usize; 2],
    pub relation_span: [usize; 2],
    pub rephrases: Vec<String>,
    pub locality: Vec<LocalityRecord>,
    pub chain_parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityRecord {
    pub prompt: String,
    pub answer: String,
}

/// An ordered sequence of edits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EditStream {
    pub records: Vec<StreamRecord>,
}

impl EditStream {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Chain links `(parent, child)` with parent earlier.
    pub fn chain_links(&self) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .filter_map(|r| r.chain_parent.map(|p| (p, r.id)))
            .collect()
    }

    /// Resolve records into tokenized samples against a vocabulary.
    pub fn to_samples(&self, vocab: &Vocab) -> Result<Vec<EditSample>> {
        self.records
            .iter()
            .map(|r| {
                let prompt_tokens = vocab.tokenize(&r.prompt)?;
                let rephrases = r
                    .rephrases
                    .iter()
                    .map(|p| Ok(RephrasePrompt { tokens: vocab.tokenize(p)? }))
                    .collect::<Result<Vec<_>>>()?;
                let locality = r
                    .locality
                    .iter()
                    .map(|p| {
                        Ok(LocalityProbe {
                            tokens: vocab.tokenize(&p.prompt)?,
                            answer: vocab.token(&p.answer)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let essence = format!("{} is a", r.subject);
                let sample = EditSample {
                    id: r.id,
                    subject: r.subject.clone(),
                    relation: r.relation.clone(),
                    old_object: r.old_object.clone(),
                    new_object: r.new_object.clone(),
                    prompt_tokens,
                    subject_span: (r.subject_span[0], r.subject_span[1]),
                    relation_span: (r.relation_span[0], r.relation_span[1]),
                    target_token: vocab.token(&r.new_object)?,
                    old_target_token: vocab.token(&r.old_object)?,
                    rephrases,
                    locality,
                    essence_tokens: vocab.tokenize(&essence)?,
                    chain_parent: r.chain_parent,
                };
                sample.validate()?;
                Ok(sample)
            })
            .collect()
    }
}

/// Build an edit stream over a world.
///
/// `chain_fraction` of the samples participate in chain links (half as
/// dependents, half as bases, adjacent in the stream). Locality probes come
/// from facts untouched by any edit whose subjects are also untouched.
pub fn generate_edit_stream(
    world: &SyntheticWorld,
    t_edits: usize,
    chain_fraction: f64,
    n_rephrase: usize,
    n_locality: usize,
    seed: u64,
) -> Result<EditStream> {
    if t_edits == 0 {
        return Err(Error::Config("edit count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&chain_fraction) {
        return Err(Error::Config(format!(
            "chain_fraction {chain_fraction} outside [0, 1]"
        )));
    }
    let max_rephrase = world.templates.len() - 1;
    if n_rephrase == 0 || n_rephrase > max_rephrase {
        return Err(Error::Config(format!(
            "n_rephrase {n_rephrase} outside 1..={max_rephrase}"
        )));
    }
    if n_locality == 0 {
        return Err(Error::Config("n_locality must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_links = ((chain_fraction * t_edits as f64) / 2.0).round() as usize;
    let mut chain_subjects = world.chain_subjects();
    chain_subjects.shuffle(&mut rng);
    if n_links > chain_subjects.len() {
        return Err(Error::Data(format!(
            "chain_fraction demands {n_links} linkable subjects, world has {}",
            chain_subjects.len()
        )));
    }
    let n_filler = t_edits - 2 * n_links;
    let mut filler_facts: Vec<&Fact> = world
        .facts
        .iter()
        .filter(|f| f.relation >= FILLER_REL_START)
        .collect();
    filler_facts.shuffle(&mut rng);
    if n_filler > filler_facts.len() {
        return Err(Error::Data(format!(
            "stream needs {n_filler} filler facts, world has {}",
            filler_facts.len()
        )));
    }

    // Unit list: one unit per chain pair, one per filler edit.
    enum Unit {
        Chain { subject: usize },
        Filler { fact: Fact },
    }
    let mut units: Vec<Unit> = Vec::with_capacity(n_links + n_filler);
    for &s in chain_subjects.iter().take(n_links) {
        units.push(Unit::Chain { subject: s });
    }
    for f in filler_facts.iter().take(n_filler) {
        units.push(Unit::Filler { fact: **f });
    }
    units.shuffle(&mut rng);

    // Planned edits as (subject, relation, old object, new object, parent offset).
    let paired = world.entities.len() - (world.entities.len() % 2);
    let mut planned: Vec<(usize, usize, usize, usize, Option<usize>)> = Vec::new();
    for unit in &units {
        match unit {
            Unit::Chain { subject } => {
                let p_old = world
                    .object_of(*subject, CHAIN_BASE_REL)
                    .expect("chain subject has base fact");
                let p_new = loop {
                    let cand = rng.gen_range(0..paired);
                    if cand != p_old && cand != *subject {
                        break cand;
                    }
                };
                let dep_old = world
                    .object_of(*subject, CHAIN_DEP_REL)
                    .expect("chain subject has dep fact");
                // Dependent first, then base; targets consistent with the
                // partner pairing so self-correction re-derives them.
                let dep_idx = planned.len();
                planned.push((*subject, CHAIN_DEP_REL, dep_old, p_new ^ 1, None));
                planned.push((*subject, CHAIN_BASE_REL, p_old, p_new, Some(dep_idx)));
            }
            Unit::Filler { fact } => {
                let o_new = loop {
                    let cand = rng.gen_range(0..world.entities.len());
                    if cand != fact.object && cand != fact.subject {
                        break cand;
                    }
                };
                planned.push((fact.subject, fact.relation, fact.object, o_new, None));
            }
        }
    }

    // Locality pool: untouched facts on untouched subjects.
    let edited_pairs: HashSet<(usize, usize)> =
        planned.iter().map(|(s, r, ..)| (*s, *r)).collect();
    let edited_subjects: HashSet<usize> = planned.iter().map(|(s, ..)| *s).collect();
    let mut locality_pool: Vec<&Fact> = world
        .facts
        .iter()
        .filter(|f| {
            !edited_pairs.contains(&(f.subject, f.relation))
                && !edited_subjects.contains(&f.subject)
        })
        .collect();
    locality_pool.shuffle(&mut rng);
    if locality_pool.is_empty() {
        return Err(Error::Data("no untouched facts left for locality probes".into()));
    }

    let mut records = Vec::with_capacity(t_edits);
    let mut probe_cursor = 0usize;
    for (id, (s, r, o_old, o_new, parent)) in planned.iter().enumerate() {
        let rendered = world.render(*s, *r, 0)?;
        let rephrases = (1..=n_rephrase)
            .map(|t| Ok(world.render(*s, *r, t)?.text))
            .collect::<Result<Vec<_>>>()?;
        let mut locality = Vec::with_capacity(n_locality);
        for k in 0..n_locality {
            let f = locality_pool[(probe_cursor + k) % locality_pool.len()];
            let template = (probe_cursor + k) % world.templates.len();
            locality.push(LocalityRecord {
                prompt: world.render(f.subject, f.relation, template)?.text,
                answer: world.entities[f.object].clone(),
            });
        }
        probe_cursor += n_locality;
        records.push(StreamRecord {
            id,
            subject: world.entities[*s].clone(),
            relation: world.relations[*r].clone(),
            old_object: world.entities[*o_old].clone(),
            new_object: world.entities[*o_new].clone(),
            prompt: rendered.text,
            subject_span: [rendered.subject_span.0, rendered.subject_span.1],
            relation_span: [rendered.relation_span.0, rendered.relation_span.1],
            rephrases,
            locality,
            chain_parent: *parent,
        });
    }
    Ok(EditStream { records })
}

/// A constructed two-edit chained scenario: the dependent fact goes stale
/// first, the base fact changes second, and the dependent query's correct
/// answer becomes the partner of the new base object.
#[derive(Debug, Clone)]
pub struct ChainScenario {
    pub dep_record: StreamRecord,
    pub base_record: StreamRecord,
    /// Tokens of the dependent query (the dependent edit's prompt).
    pub dep_query: Vec<TokenId>,
    /// Correct answer after realignment: partner of the new base object.
    pub realigned_answer: TokenId,
    /// Answer installed by the stale dependent edit.
    pub stale_answer: TokenId,
}

/// Build one seeded scenario instance over a world with chain structure.
pub fn chain_scenario(world: &SyntheticWorld, seed: u64) -> Result<ChainScenario> {
    let subjects = world.chain_subjects();
    if subjects.is_empty() {
        return Err(Error::Data("world has no chain-eligible subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = subjects[rng.gen_range(0..subjects.len())];
    let p_old = world.object_of(s, CHAIN_BASE_REL).expect("base fact");
    let dep_old = world.object_of(s, CHAIN_DEP_REL).expect("dep fact");
    let paired = world.entities.len() - (world.entities.len() % 2);
    let p_stale = loop {
        let cand = rng.gen_range(0..paired);
        if cand != p_old && cand != s && (cand ^ 1) != dep_old {
            break cand;
        }
    };
    let p_new = loop {
        let cand = rng.gen_range(0..paired);
        if cand != p_old && cand != p_stale && cand != s {
            break cand;
        }
    };

    let dep_rendered = world.render(s, CHAIN_DEP_REL, 0)?;
    let base_rendered = world.render(s, CHAIN_BASE_REL, 0)?;
    let mk_locality = |rng: &mut ChaCha8Rng| -> Result<Vec<LocalityRecord>> {
        // Any fact on an unrelated subject.
        let f = loop {
            let cand = &world.facts[rng.gen_range(0..world.facts.len())];
            if cand.subject != s {
                break cand;
            }
        };
        Ok(vec![LocalityRecord {
            prompt: world.render(f.subject, f.relation, 0)?.text,
            answer: world.entities[f.object].clone(),
        }])
    };
    let dep_record = StreamRecord {
        id: 0,
        subject: world.entities[s].clone(),
        relation: world.relations[CHAIN_DEP_REL].clone(),
        old_object: world.entities[dep_old].clone(),
        new_object: world.entities[p_stale ^ 1].clone(),
        prompt: dep_rendered.text.clone(),
        subject_span: [dep_rendered.subject_span.0, dep_rendered.subject_span.1],
        relation_span: [dep_rendered.relation_span.0, dep_rendered.relation_span.1],
        rephrases: vec![world.render(s, CHAIN_DEP_REL, 1)?.text],
        locality: mk_locality(&mut rng)?,
        chain_parent: None,
    };
    let base_record = StreamRecord {
        id: 1,
        subject: world.entities[s].clone(),
        relation: world.relations[CHAIN_BASE_REL].clone(),
        old_object: world.entities[p_old].clone(),
        new_object: world.entities[p_new].clone(),
        prompt: base_rendered.text.clone(),
        subject_span: [base_rendered.subject_span.0, base_rendered.subject_span.1],
        relation_span: [base_rendered.relation_span.0, base_rendered.relation_span.1],
        rephrases: vec![world.render(s, CHAIN_BASE_REL, 1)?.text],
        locality: mk_locality(&mut rng)?,
        chain_parent: Some(0),
    };
    Ok(ChainScenario {
        dep_query: dep_rendered.tokens,
        realigned_answer: world.entity_token(p_new ^ 1),
        stale_answer: world.entity_token(p_stale ^ 1),
        dep_record,
        base_record,
    })
}

pub fn save_world(world: &SyntheticWorld, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(world)?)?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<SyntheticWorld> {
    let raw = fs::read_to_string(path)?;
    let mut world: SyntheticWorld = serde_json::from_str(&raw)?;
    world.vocab.rebuild_index();
    Ok(world)
}

/// One JSON record per line, LF-terminated.
pub fn save_stream(stream: &EditStream, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for record in &stream.records {
        let line = serde_json::to_string(record)?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Inverse of [`save_stream`]; malformed lines fail with their line number.
pub fn load_stream(path: &Path) -> Result<EditStream> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StreamRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(EditStream { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_world() -> SyntheticWorld {
        generate_world(7, 24, 6, 80).unwrap()
    }

    #[test]
    fn world_generation_is_deterministic() {
        let a = generate_world(3, 20, 6, 60).unwrap();
        let b = generate_world(3, 20, 6, 60).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn world_has_exact_fact_count_and_unique_pairs() {
        let w = small_world();
        assert_eq!(w.facts.len(), 80);
        let pairs: HashSet<(usize, usize)> =
            w.facts.iter().map(|f| (f.subject, f.relation)).collect();
        assert_eq!(pairs.len(), 80, "duplicate (s, r) pair");
    }

    #[test]
    fn world_rejects_infeasible_counts() {
        assert!(matches!(generate_world(0, 2, 6, 10), Err(Error::Config(_))));
        assert!(matches!(generate_world(0, 20, 6, 0), Err(Error::Config(_))));
        assert!(matches!(generate_world(0, 20, 6, 1000), Err(Error::Config(_))));
    }

    #[test]
    fn rendered_prompts_roundtrip_with_exact_spans() {
        let w = small_world();
        for fact in &w.facts {
            for t in 0..w.templates.len() {
                let r = w.render(fact.subject, fact.relation, t).unwrap();
                // Detokenize and re-tokenize reproduces the prompt.
                assert_eq!(w.vocab.detokenize(&r.tokens), r.text);
                assert_eq!(w.vocab.tokenize(&r.text).unwrap(), r.tokens);
                // Spans point at the subject/relation words.
                assert_eq!(
                    w.vocab.word(r.tokens[r.subject_span.0]),
                    w.entities[fact.subject]
                );
                assert_eq!(
                    w.vocab.word(r.tokens[r.relation_span.0]),
                    w.relations[fact.relation]
                );
            }
        }
    }

    #[test]
    fn partner_facts_are_systematic() {
        let w = small_world();
        for e in 0..w.entities.len() - (w.entities.len() % 2) {
            assert_eq!(w.object_of(e, PARTNER_REL), Some(e ^ 1));
        }
    }

    #[test]
    fn stream_zero_chain_fraction_has_no_links() {
        let w = small_world();
        let s = generate_edit_stream(&w, 10, 0.0, 2, 2, 1).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.chain_links().is_empty());
    }

    #[test]
    fn stream_chain_fraction_produces_expected_links() {
        let w = generate_world(11, 60, 8, 220).unwrap();
        let s = generate_edit_stream(&w, 40, 0.3, 2, 2, 2).unwrap();
        let linked: usize = s.chain_links().len() * 2;
        assert!(
            (linked as i64 - 12).abs() <= 2,
            "expected about 12 linked samples, got {linked}"
        );
        // Parent precedes child.
        for (p, c) in s.chain_links() {
            assert!(p < c);
        }
    }

    #[test]
    fn stream_locality_probes_untouched() {
        let w = small_world();
        let s = generate_edit_stream(&w, 12, 0.3, 2, 2, 3).unwrap();
        let edited: HashSet<(String, String)> = s
            .records
            .iter()
            .map(|r| (r.subject.clone(), r.relation.clone()))
            .collect();
        for rec in &s.records {
            for probe in &rec.locality {
                // The probe prompt's subject/relation pair is never edited.
                let words: Vec<&str> = probe.prompt.split_whitespace().collect();
                let has_edited = edited.iter().any(|(es, er)| {
                    words.contains(&es.as_str()) && words.contains(&er.as_str())
                });
                assert!(!has_edited, "locality probe overlaps an edit: {}", probe.prompt);
            }
        }
    }

    #[test]
    fn stream_targets_differ_from_current_objects() {
        let w = small_world();
        let s = generate_edit_stream(&w, 12, 0.4, 2, 2, 4).unwrap();
        for r in &s.records {
            assert_ne!(r.new_object, r.old_object);
        }
    }

    #[test]
    fn stream_errors_when_world_too_small() {
        let w = generate_world(5, 8, 4, 12).unwrap();
        assert!(matches!(
            generate_edit_stream(&w, 12, 1.0, 2, 2, 5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stream_round_trip() {
        let w = small_world();
        let s = generate_edit_stream(&w, 8, 0.25, 2, 2, 6).unwrap();
        let dir = std::env::temp_dir().join("qedit_dataset_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("stream.jsonl");
        save_stream(&s, &path).unwrap();
        let loaded = load_stream(&path).unwrap();
        assert_eq!(s, loaded);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_stream_names_the_line() {
        let dir = std::env::temp_dir().join("qedit_dataset_trunc");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        fs::write(&path, "{\"id\": 0, \"subject\"").unwrap();
        match load_stream(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_stream_file_is_empty_stream() {
        let dir = std::env::temp_dir().join("qedit_dataset_empty");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let s = load_stream(&path).unwrap();
        assert!(s.is_empty());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn samples_resolve_and_validate() {
        let w = small_world();
        let s = generate_edit_stream(&w, 10, 0.4, 2, 2, 7).unwrap();
        let samples = s.to_samples(&w.vocab).unwrap();
        assert_eq!(samples.len(), 10);
        for (sample, record) in samples.iter().zip(&s.records) {
            assert_eq!(
                w.vocab.word(sample.prompt_tokens[sample.subject_span.0]),
                record.subject
            );
            assert_eq!(sample.rephrases.len(), 2);
            assert_eq!(sample.locality.len(), 2);
            assert_eq!(sample.essence_tokens.len(), 3);
        }
    }

    #[test]
    fn chain_scenario_is_coherent() {
        let w = small_world();
        for seed in 0..10 {
            let sc = chain_scenario(&w, seed).unwrap();
            assert_ne!(sc.realigned_answer, sc.stale_answer);
            assert_eq!(sc.base_record.chain_parent, Some(0));
            // Realigned answer is the partner of the new base object.
            let p_new = w.vocab.token(&sc.base_record.new_object).unwrap();
            let p_new_idx = p_new - GLUE_WORDS.len();
            assert_eq!(sc.realigned_answer, w.entity_token(p_new_idx ^ 1));
            // Stale answer is what the dependent edit installs.
            assert_eq!(
                sc.stale_answer,
                w.vocab.token(&sc.dep_record.new_object).unwrap()
            );
        }
    }

    #[test]
    fn world_round_trip() {
        let w = small_world();
        let dir = std::env::temp_dir().join("qedit_world_rt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("world.json");
        save_world(&w, &path).unwrap();
        let loaded = load_world(&path).unwrap();
        assert_eq!(w, loaded);
        // The rebuilt index works.
        assert_eq!(loaded.vocab.token("the").unwrap(), 0);
        fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn generation_pure_function_of_seed(seed in 0u64..5000) {
            let a = generate_world(seed, 16, 6, 40).unwrap();
            let b = generate_world(seed, 16, 6, 40).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rephrases_share_the_answer(seed in 0u64..1000) {
            let w = generate_world(seed, 24, 6, 80).unwrap();
            let s = generate_edit_stream(&w, 6, 0.3, 2, 1, seed).unwrap();
            for r in &s.records {
                // Every rephrase mentions the same subject and relation, and
                // the recorded answer is shared by construction.
                for p in &r.rephrases {
                    let words: Vec<&str> = p.split_whitespace().collect();
                    prop_assert!(words.contains(&r.subject.as_str()));
                    prop_assert!(words.contains(&r.relation.as_str()));
                }
            }
        }
    }
}
