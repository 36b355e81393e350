//! Seeded synthetic drug catalog and patient-case generators, and the
//! dataset CSV format.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{derive_alert, AlertType, ClassificationCategory, ReactionType};
use crate::engine::{ingredient_names, member_covers, ExcipientGroups};
use crate::gateway::GroundTruthTag;
use crate::ingest::{check_header, IngestError, RowDiagnostic};
use crate::knowledge::{is_atc_shape, DrugRecord};
use crate::synonyms::normalize;

use ClassificationCategory as C;
use ReactionType as R;

pub const DATASET_HEADER: [&str; 8] = [
    "Patient_ID",
    "Drug_code",
    "Drug_name",
    "Clinical_note",
    "Classification",
    "Alert_type",
    "Reaction_type",
    "Prescribed_ATC",
];

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid drug class distribution: {0}")]
    Distribution(String),
    #[error("strata counts sum to {actual}, declared total is {declared}")]
    StrataTotal { declared: usize, actual: usize },
    #[error("invalid stratum: {0}")]
    Stratum(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("no catalog drug can carry a {0} case")]
    NoEligibleDrug(ClassificationCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugClassSpec {
    pub name: String,
    /// Informational prefix shared by the pool; empty for the mixed class.
    pub atc_prefix: String,
    /// `(ATC code, active ingredient)` choices for this class.
    pub pool: Vec<(String, String)>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugClassDistribution {
    pub classes: Vec<DrugClassSpec>,
}

fn class(name: &str, prefix: &str, pool: &[(&str, &str)], count: usize) -> DrugClassSpec {
    DrugClassSpec {
        name: name.to_string(),
        atc_prefix: prefix.to_string(),
        pool: pool.iter().map(|(a, i)| (a.to_string(), i.to_string())).collect(),
        count,
    }
}

impl DrugClassDistribution {
    /// The class mix of the reference dataset: 1,000 drugs.
    pub fn paper() -> Self {
        DrugClassDistribution {
            classes: vec![
                class(
                    "Opioids",
                    "N02A",
                    &[
                        ("N02AA01", "morphine sulfate"),
                        ("N02AA03", "hydromorphone hydrochloride"),
                        ("N02AA05", "oxycodone hydrochloride"),
                        ("N02AA59", "codeine phosphate"),
                        ("N02AB02", "pethidine hydrochloride"),
                        ("N02AB03", "fentanyl citrate"),
                        ("N02AE01", "buprenorphine hydrochloride"),
                        ("N02AX02", "tramadol hydrochloride"),
                        ("N02AX06", "tapentadol hydrochloride"),
                    ],
                    653,
                ),
                class(
                    "Antibiotics",
                    "J01",
                    &[
                        ("J01CA01", "ampicillin"),
                        ("J01CA04", "amoxicillin"),
                        ("J01DD01", "cefotaxime"),
                        ("J01DD04", "ceftriaxone"),
                        ("J01FA09", "clarithromycin"),
                        ("J01FA10", "azithromycin"),
                        ("J01MA02", "ciprofloxacin"),
                        ("J01MA12", "levofloxacin"),
                    ],
                    152,
                ),
                class(
                    "NSAID",
                    "M01A",
                    &[
                        ("M01AB05", "diclofenac sodium"),
                        ("M01AB15", "ketorolac trometamol"),
                        ("M01AE01", "ibuprofen"),
                        ("M01AE02", "naproxen"),
                        ("M01AE03", "ketoprofen"),
                    ],
                    47,
                ),
                class(
                    "Diuretics",
                    "C03",
                    &[
                        ("C03CA01", "furosemide"),
                        ("C03CA02", "bumetanide"),
                        ("C03AA03", "hydrochlorothiazide"),
                        ("C03DA01", "spironolactone"),
                    ],
                    24,
                ),
                class(
                    "Antiplatelet agents",
                    "B01AC",
                    &[
                        ("B01AC04", "clopidogrel"),
                        ("B01AC06", "acetylsalicylic acid"),
                        ("B01AC22", "prasugrel"),
                        ("B01AC24", "ticagrelor"),
                    ],
                    16,
                ),
                class(
                    "Other",
                    "",
                    &[
                        ("A02BC01", "omeprazole"),
                        ("A10BA02", "metformin hydrochloride"),
                        ("D07AC01", "betamethasone"),
                        ("G04CA02", "tamsulosin hydrochloride"),
                        ("H02AB06", "prednisolone"),
                        ("H03AA01", "levothyroxine sodium"),
                        ("L04AX03", "methotrexate"),
                        ("P01AB01", "metronidazole"),
                        ("R06AE07", "cetirizine dihydrochloride"),
                        ("R06AE09", "levocetirizine dihydrochloride"),
                        ("S01ED01", "timolol maleate"),
                        ("V03AB15", "naloxone hydrochloride"),
                    ],
                    108,
                ),
            ],
        }
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        for c in &self.classes {
            if c.pool.is_empty() {
                return Err(GenerateError::Distribution(format!("{} has an empty ATC pool", c.name)));
            }
            for (atc, ingredient) in &c.pool {
                if atc.len() != 7 || !is_atc_shape(atc) || !atc.starts_with(&c.atc_prefix) {
                    return Err(GenerateError::Distribution(format!(
                        "{}: {atc} is not a full ATC code under {:?}",
                        c.name, c.atc_prefix
                    )));
                }
                if ingredient.trim().is_empty() {
                    return Err(GenerateError::Distribution(format!(
                        "{}: {atc} has no ingredient",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }
}

const MAKERS: &[&str] = &[
    "TEVA",
    "MYLAN",
    "SANDOZ",
    "DOC",
    "EG",
    "ZENTIVA",
    "AUROBINDO",
    "ACCORD",
    "HEXAL",
    "KRKA",
    "ABC",
    "ALMUS",
];
const FORMS: &[&str] = &[
    "tablet",
    "film-coated tablet",
    "prolonged-release tablet",
    "hard capsule",
    "oral solution",
    "syrup",
    "solution for injection",
    "eye drops, solution",
    "cream",
    "suppository",
];
const STRENGTHS: &[&str] = &[
    "2 mg", "5 mg", "10 mg", "20 mg", "40 mg", "75 mg", "100 mg", "250 mg", "500 mg",
];
const COMMON_EXCIPIENTS: &[&str] = &[
    "lactose monohydrate",
    "microcrystalline cellulose",
    "magnesium stearate",
    "maize starch",
    "sucrose",
    "povidone",
    "croscarmellose sodium",
    "talc",
    "titanium dioxide",
    "hypromellose",
    "colloidal anhydrous silica",
    "sodium chloride",
    "water for injections",
    "sodium citrate",
    "citric acid monohydrate",
    "glycerol",
    "sorbitol",
    "sodium benzoate",
    "ethanol",
    "gelatin",
];
/// Guaranteed in a fixed share of records, one per curated group the
/// reference study names.
const SEEDED_GROUP_EXCIPIENTS: &[&str] = &["macrogol 4000", "polysorbate 80", "benzalkonium chloride"];
const OCCASIONAL_GROUP_EXCIPIENTS: &[&str] = &[
    "macrogol 400",
    "polysorbate 20",
    "benzalkonium chloride",
    "methyl parahydroxybenzoate",
    "propyl parahydroxybenzoate",
    "sodium metabisulfite",
];
/// One record in this many receives each seeded group excipient.
const SEEDED_GROUP_PERIOD: usize = 50;

fn class_texts(name: &str) -> (&'static str, &'static str, &'static str) {
    match name {
        "Opioids" => (
            "Concomitant use with benzodiazepines or other CNS depressants increases the risk of respiratory depression.",
            "Constipation, nausea, drowsiness, dizziness, respiratory depression.",
            "Severe respiratory depression; acute or severe bronchial asthma; paralytic ileus.",
        ),
        "Antibiotics" => (
            "May reduce the efficacy of oral contraceptives; monitor INR with oral anticoagulants.",
            "Diarrhoea, nausea, skin rash, candidiasis.",
            "History of severe hypersensitivity to other beta-lactam or related antibacterials.",
        ),
        "NSAID" => (
            "Increased bleeding risk with anticoagulants and antiplatelet agents; reduced effect of diuretics.",
            "Dyspepsia, abdominal pain, nausea, gastrointestinal bleeding.",
            "Active peptic ulcer; severe heart failure; history of bronchospasm after NSAIDs.",
        ),
        "Diuretics" => (
            "Increased risk of hypokalaemia with corticosteroids; lithium levels may rise.",
            "Electrolyte disturbances, dehydration, hypotension.",
            "Anuria; severe hypokalaemia or hyponatraemia.",
        ),
        "Antiplatelet agents" => (
            "Additive bleeding risk with anticoagulants and NSAIDs.",
            "Bleeding, bruising, dyspepsia.",
            "Active pathological bleeding; severe hepatic impairment.",
        ),
        _ => (
            "See product literature for interactions.",
            "Headache, nausea.",
            "Pregnancy unless clearly necessary.",
        ),
    }
}

fn unique_code(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let code = format!("{:09}", rng.random_range(10_000_000u32..50_000_000));
        if used.insert(code.clone()) {
            return code;
        }
    }
}

/// Builds `distribution.total()` drug records. Equal seeds give equal
/// catalogs.
pub fn generate_drug_catalog(
    distribution: &DrugClassDistribution,
    seed: u64,
) -> Result<Vec<DrugRecord>, GenerateError> {
    distribution.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(distribution.total());
    for spec in &distribution.classes {
        let (interactions, side_effects, contra) = class_texts(&spec.name);
        for _ in 0..spec.count {
            let (atc, ingredient) = spec.pool.choose(&mut rng).expect("pool validated non-empty");
            let form = *FORMS.choose(&mut rng).expect("non-empty");
            let maker = *MAKERS.choose(&mut rng).expect("non-empty");
            let strength = *STRENGTHS.choose(&mut rng).expect("non-empty");
            let n_common = rng.random_range(3..=5);
            let mut excipients: Vec<String> = COMMON_EXCIPIENTS
                .choose_multiple(&mut rng, n_common)
                .map(|s| s.to_string())
                .collect();
            let slot = out.len() % SEEDED_GROUP_PERIOD;
            if let Some(seeded) = SEEDED_GROUP_EXCIPIENTS.get(slot) {
                excipients.push(seeded.to_string());
            }
            if form.starts_with("eye drops") {
                excipients.push("benzalkonium chloride".into());
            }
            if rng.random_bool(0.06) {
                excipients.push(
                    OCCASIONAL_GROUP_EXCIPIENTS
                        .choose(&mut rng)
                        .expect("non-empty")
                        .to_string(),
                );
            }
            let mut seen = BTreeSet::new();
            excipients.retain(|e| seen.insert(e.clone()));
            let base = ingredient
                .split_whitespace()
                .next()
                .unwrap_or(ingredient)
                .to_uppercase();
            out.push(DrugRecord {
                drug_code: unique_code(&mut rng, &mut used),
                drug_name: format!("{base} {maker}"),
                drug_form: form.to_string(),
                atc_code: atc.clone(),
                composition: format!("{ingredient} ({strength})"),
                excipients: excipients.join("; "),
                contraindications: format!(
                    "Hypersensitivity to the active substance or to any of the excipients. {contra}"
                ),
                drug_interactions: interactions.to_string(),
                side_effects: side_effects.to_string(),
                incompatibilities: if form.contains("injection") {
                    "Must not be mixed with other medicinal products.".into()
                } else {
                    "Not applicable.".into()
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStratum {
    pub classification: ClassificationCategory,
    pub reaction: ReactionType,
    pub alert: AlertType,
    pub count: usize,
}

impl CaseStratum {
    pub fn new(classification: ClassificationCategory, reaction: ReactionType, count: usize) -> Self {
        CaseStratum {
            classification,
            reaction,
            alert: derive_alert(classification, reaction),
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStrata {
    pub strata: Vec<CaseStratum>,
    pub total: usize,
}

impl CaseStrata {
    /// The 15 strata of the reference dataset, 1,000 cases in all.
    pub fn paper() -> Self {
        let rows = [
            (C::NoDocumentedReactions, R::None, 11),
            (C::NoReactivityToPrescribedDrug, R::None, 30),
            (C::DirectActiveIngredientReactivity, R::LifeThreatening, 9),
            (
                C::DirectActiveIngredientReactivity,
                R::NonLifeThreateningImmuneMediated,
                12,
            ),
            (
                C::DirectActiveIngredientReactivity,
                R::NonLifeThreateningNonImmuneMediated,
                9,
            ),
            (C::DirectExcipientReactivity, R::LifeThreatening, 6),
            (C::DirectExcipientReactivity, R::NonLifeThreateningImmuneMediated, 4),
            (C::DirectExcipientReactivity, R::NonLifeThreateningNonImmuneMediated, 14),
            (C::ChemicalCrossReactivityToExcipients, R::LifeThreatening, 15),
            (
                C::ChemicalCrossReactivityToExcipients,
                R::NonLifeThreateningImmuneMediated,
                9,
            ),
            (
                C::ChemicalCrossReactivityToExcipients,
                R::NonLifeThreateningNonImmuneMediated,
                26,
            ),
            (C::DrugClassCrossReactivityWithoutTolerance, R::LifeThreatening, 103),
            (
                C::DrugClassCrossReactivityWithoutTolerance,
                R::NonLifeThreateningImmuneMediated,
                271,
            ),
            (
                C::DrugClassCrossReactivityWithoutTolerance,
                R::NonLifeThreateningNonImmuneMediated,
                126,
            ),
            (C::DrugClassCrossReactivityWithTolerance, R::None, 355),
        ];
        CaseStrata {
            strata: rows.iter().map(|&(c, r, n)| CaseStratum::new(c, r, n)).collect(),
            total: 1000,
        }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        for s in &self.strata {
            if s.count == 0 {
                return Err(GenerateError::Stratum(format!(
                    "{} / {} has count 0",
                    s.classification, s.reaction
                )));
            }
            if s.alert != derive_alert(s.classification, s.reaction) {
                return Err(GenerateError::Stratum(format!(
                    "{} / {} declares alert {}",
                    s.classification, s.reaction, s.alert
                )));
            }
        }
        let actual = self.strata.iter().map(|s| s.count).sum();
        if actual != self.total {
            return Err(GenerateError::StrataTotal {
                declared: self.total,
                actual,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub patient_id: String,
    pub drug_code: String,
    pub drug_name: String,
    pub clinical_note: String,
    pub classification: ClassificationCategory,
    pub alert_type: AlertType,
    pub reaction_type: ReactionType,
    pub prescribed_atc: String,
}

/// Catalog views used to pick drugs that can carry each kind of case.
struct CatalogIndex<'a> {
    catalog: &'a [DrugRecord],
    actives: Vec<Vec<String>>,
    active_keys: Vec<BTreeSet<String>>,
    excipients: Vec<Vec<String>>,
    by_level4: BTreeMap<String, Vec<usize>>,
    groups: ExcipientGroups,
}

impl<'a> CatalogIndex<'a> {
    fn new(catalog: &'a [DrugRecord]) -> Self {
        let actives: Vec<Vec<String>> = catalog.iter().map(|d| ingredient_names(&d.composition)).collect();
        let active_keys = actives
            .iter()
            .map(|a| a.iter().map(|s| normalize(s)).collect())
            .collect();
        let excipients = catalog.iter().map(|d| ingredient_names(&d.excipients)).collect();
        let mut by_level4: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, d) in catalog.iter().enumerate() {
            if let Some(p) = d.atc_level4() {
                by_level4.entry(p.to_string()).or_default().push(i);
            }
        }
        CatalogIndex {
            catalog,
            actives,
            active_keys,
            excipients,
            by_level4,
            groups: ExcipientGroups::builtin(),
        }
    }

    fn shares_active(&self, a: usize, b: usize) -> bool {
        !self.active_keys[a].is_disjoint(&self.active_keys[b])
    }

    /// Same-class drugs with a different active ingredient.
    fn class_siblings(&self, i: usize) -> Vec<usize> {
        let Some(p) = self.catalog[i].atc_level4() else {
            return Vec::new();
        };
        self.by_level4[p]
            .iter()
            .copied()
            .filter(|&j| j != i && !self.actives[j].is_empty() && !self.shares_active(i, j))
            .collect()
    }

    /// Group members related to one of the drug's excipients but absent from
    /// the drug itself.
    fn related_excipients(&self, i: usize) -> Vec<String> {
        let own: Vec<String> = self.excipients[i].iter().map(|e| normalize(e)).collect();
        let mut out = Vec::new();
        for g in self.groups.matching(&self.excipients[i]) {
            for m in &g.members {
                let nm = normalize(m);
                if !own.iter().any(|e| member_covers(&nm, e)) && !out.contains(m) {
                    out.push(m.clone());
                }
            }
        }
        out
    }

    fn is_unrelated(&self, i: usize, j: usize) -> bool {
        self.catalog[j].atc_code.get(..1) != self.catalog[i].atc_code.get(..1)
            && !self.actives[j].is_empty()
            && !self.shares_active(i, j)
    }

    /// Drugs from another anatomical group with no shared active ingredient.
    fn unrelated(&self, i: usize) -> Vec<usize> {
        (0..self.catalog.len()).filter(|&j| self.is_unrelated(i, j)).collect()
    }

    fn eligible(&self, c: ClassificationCategory) -> Vec<usize> {
        (0..self.catalog.len())
            .filter(|&i| match c {
                C::NoDocumentedReactions => true,
                C::NoReactivityToPrescribedDrug => (0..self.catalog.len()).any(|j| self.is_unrelated(i, j)),
                C::DirectActiveIngredientReactivity => !self.actives[i].is_empty(),
                C::DirectExcipientReactivity => !self.excipients[i].is_empty(),
                C::ChemicalCrossReactivityToExcipients => !self.related_excipients(i).is_empty(),
                C::DrugClassCrossReactivityWithoutTolerance | C::DrugClassCrossReactivityWithTolerance => {
                    !self.actives[i].is_empty()
                        && self.catalog[i].atc_level4().is_some_and(|p| {
                            self.by_level4[p]
                                .iter()
                                .any(|&j| !self.actives[j].is_empty() && !self.shares_active(i, j))
                        })
                }
            })
            .collect()
    }
}

const VISIT_REASONS: &[&str] = &[
    "admitted for post-operative pain management after knee replacement",
    "seen in the emergency department with acute renal colic",
    "reviewed in clinic for chronic low back pain",
    "attending follow-up for heart failure with fluid overload",
    "admitted with community-acquired pneumonia",
    "assessed for cancer-related pain",
    "seen for an acute gout flare",
    "referred after a hip fracture",
    "presenting with a dental abscess",
    "attending a pre-operative assessment",
];
const BACKGROUND: &[&str] = &[
    "Past medical history of hypertension and type 2 diabetes.",
    "Lives alone and is independent with daily activities.",
    "Former smoker, 20 pack-years.",
    "Known chronic kidney disease, stage 3.",
    "No significant past medical history.",
    "History of atrial fibrillation on rate control.",
];
const TIMINGS: &[&str] = &[
    "in 2019",
    "about three years ago",
    "during a hospital stay in 2021",
    "within an hour of the first dose",
    "as a child",
    "last spring",
    "two days into a course",
];

fn symptoms(reaction: ReactionType) -> &'static [&'static str] {
    match reaction {
        R::LifeThreatening => &[
            "anaphylaxis with hypotension and throat swelling requiring adrenaline",
            "anaphylactic shock requiring intensive care admission",
            "angioedema with airway compromise",
            "Stevens-Johnson syndrome with mucosal involvement",
        ],
        R::NonLifeThreateningImmuneMediated => &[
            "generalised urticaria with pruritus",
            "a maculopapular rash over the trunk",
            "swelling of the lips without breathing difficulty",
            "a fixed drug eruption on the forearm",
        ],
        R::NonLifeThreateningNonImmuneMediated => &[
            "persistent nausea and vomiting",
            "severe constipation",
            "marked drowsiness and dizziness",
            "epigastric pain and dyspepsia",
        ],
        R::None => &[],
    }
}

fn any_symptom(rng: &mut ChaCha8Rng) -> &'static str {
    let r = *[
        R::LifeThreatening,
        R::NonLifeThreateningImmuneMediated,
        R::NonLifeThreateningNonImmuneMediated,
    ]
    .choose(rng)
    .expect("non-empty");
    symptoms(r).choose(rng).expect("non-empty")
}

fn pick<'s>(rng: &mut ChaCha8Rng, items: &'s [&'s str]) -> &'s str {
    items.choose(rng).expect("non-empty")
}

fn narrative(
    rng: &mut ChaCha8Rng,
    index: &CatalogIndex<'_>,
    drug: usize,
    classification: ClassificationCategory,
    reaction: ReactionType,
) -> String {
    let age = rng.random_range(19..=92);
    let sex = if rng.random_bool(0.5) { "male" } else { "female" };
    let intro = format!("{age}-year-old {sex} patient {}.", pick(rng, VISIT_REASONS));
    let background = pick(rng, BACKGROUND);
    let timing = pick(rng, TIMINGS);
    let symptom = if reaction == R::None {
        any_symptom(rng)
    } else {
        symptoms(reaction).choose(rng).expect("non-empty")
    };
    let active = index.actives[drug].first().cloned().unwrap_or_default();
    let history = match classification {
        C::NoDocumentedReactions => {
            let variants = [
                "No known drug allergies or intolerances.".to_string(),
                "Denies any previous adverse reaction to medicines.".to_string(),
            ];
            variants.choose(rng).expect("non-empty").clone()
        }
        C::NoReactivityToPrescribedDrug => {
            let other = *index.unrelated(drug).choose(rng).expect("eligible");
            let other_name = &index.actives[other][0];
            format!("Reports {symptom} after taking {other_name} {timing}. No other drug reactions recorded.")
        }
        C::DirectActiveIngredientReactivity => {
            format!("Developed {symptom} {timing} after taking {active}.")
        }
        C::DirectExcipientReactivity => {
            let excipient = index.excipients[drug].choose(rng).expect("eligible");
            format!(
                "Documented intolerance to {excipient}: {symptom} {timing} after a product containing it. The active ingredient itself was tolerated."
            )
        }
        C::ChemicalCrossReactivityToExcipients => {
            let related = index.related_excipients(drug);
            let member = related.choose(rng).expect("eligible");
            format!("Experienced {symptom} {timing} after a medicine formulated with {member}.")
        }
        C::DrugClassCrossReactivityWithoutTolerance => {
            let sib = *index.class_siblings(drug).choose(rng).expect("eligible");
            let sib_name = &index.actives[sib][0];
            format!("History of {symptom} {timing} after {sib_name}. No documented previous exposure to {active}.")
        }
        C::DrugClassCrossReactivityWithTolerance => {
            let sib = *index.class_siblings(drug).choose(rng).expect("eligible");
            let sib_name = &index.actives[sib][0];
            let times = rng.random_range(2..=5);
            format!(
                "History of {symptom} {timing} after {sib_name}. Has since received {active} on {times} occasions without any adverse reaction."
            )
        }
    };
    format!("{intro} {background} {history}")
}

/// Builds the cases of every stratum, shuffles them and numbers them
/// `P0001`, `P0002`, ... Each note ends with a ground-truth tag line.
pub fn generate_patient_dataset(
    strata: &CaseStrata,
    catalog: &[DrugRecord],
    seed: u64,
) -> Result<Vec<SyntheticCase>, GenerateError> {
    strata.validate()?;
    if catalog.is_empty() {
        return Err(GenerateError::EmptyCatalog);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = CatalogIndex::new(catalog);
    let mut eligible: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut drafts = Vec::with_capacity(strata.total);
    for stratum in &strata.strata {
        let pool = eligible
            .entry(stratum.classification.index())
            .or_insert_with(|| index.eligible(stratum.classification));
        if pool.is_empty() {
            return Err(GenerateError::NoEligibleDrug(stratum.classification));
        }
        let pool = pool.clone();
        for _ in 0..stratum.count {
            let drug = *pool.choose(&mut rng).expect("non-empty");
            let note = narrative(&mut rng, &index, drug, stratum.classification, stratum.reaction);
            drafts.push((drug, note, *stratum));
        }
    }
    drafts.shuffle(&mut rng);
    let width = drafts.len().to_string().len().max(4);
    Ok(drafts
        .into_iter()
        .enumerate()
        .map(|(i, (drug, note, s))| {
            let patient_id = format!("P{:0width$}", i + 1);
            let tag = GroundTruthTag {
                case_id: patient_id.clone(),
                classification: s.classification,
                reaction: s.reaction,
            };
            let d = &catalog[drug];
            SyntheticCase {
                patient_id,
                drug_code: d.drug_code.clone(),
                drug_name: d.drug_name.clone(),
                clinical_note: format!("{note}\n{}", tag.render()),
                classification: s.classification,
                alert_type: s.alert,
                reaction_type: s.reaction,
                prescribed_atc: d.atc_code.clone(),
            }
        })
        .collect())
}

/// Minimal drug records for the drugs a dataset prescribes, for evaluating
/// a dataset without its catalog.
pub fn stub_records(cases: &[SyntheticCase]) -> Vec<DrugRecord> {
    let mut seen = HashSet::new();
    cases
        .iter()
        .filter(|c| seen.insert(c.drug_code.clone()))
        .map(|c| DrugRecord {
            drug_code: c.drug_code.clone(),
            drug_name: c.drug_name.clone(),
            drug_form: "unspecified".into(),
            atc_code: c.prescribed_atc.clone(),
            composition: String::new(),
            excipients: String::new(),
            contraindications: String::new(),
            drug_interactions: String::new(),
            side_effects: String::new(),
            incompatibilities: String::new(),
        })
        .collect()
}

pub fn write_dataset_csv<W: Write>(cases: &[SyntheticCase], writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| IngestError::Csv(e.to_string());
    w.write_record(DATASET_HEADER).map_err(csv_err)?;
    for c in cases {
        w.write_record([
            c.patient_id.as_str(),
            &c.drug_code,
            &c.drug_name,
            &c.clinical_note,
            c.classification.label(),
            c.alert_type.label(),
            c.reaction_type.label(),
            &c.prescribed_atc,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.to_string()))
}

/// Reads a dataset; every bad row is reported and none are returned.
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Vec<SyntheticCase>, IngestError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(&mut r, &DATASET_HEADER)?;
    let mut cases = Vec::new();
    let mut bad = Vec::new();
    let mut ids = HashSet::new();
    for rec in r.records() {
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                bad.push(RowDiagnostic {
                    line: e.position().map_or(0, |p| p.line()),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let mut fail = |message: String| bad.push(RowDiagnostic { line, message });
        if rec.len() != DATASET_HEADER.len() {
            fail(format!("expected {} fields, found {}", DATASET_HEADER.len(), rec.len()));
            continue;
        }
        let parsed = (|| -> Result<SyntheticCase, String> {
            let case = SyntheticCase {
                patient_id: rec[0].trim().to_string(),
                drug_code: rec[1].trim().to_string(),
                drug_name: rec[2].to_string(),
                clinical_note: rec[3].to_string(),
                classification: rec[4].parse().map_err(|e: crate::domain::UnknownLabel| e.to_string())?,
                alert_type: rec[5].parse().map_err(|e: crate::domain::UnknownLabel| e.to_string())?,
                reaction_type: rec[6].parse().map_err(|e: crate::domain::UnknownLabel| e.to_string())?,
                prescribed_atc: rec[7].trim().to_string(),
            };
            if case.patient_id.is_empty() || case.drug_code.is_empty() {
                return Err("Patient_ID and Drug_code must not be empty".into());
            }
            let derived = derive_alert(case.classification, case.reaction_type);
            if case.alert_type != derived {
                return Err(format!(
                    "Alert_type {} does not follow from the labels (expected {derived})",
                    case.alert_type
                ));
            }
            Ok(case)
        })();
        match parsed {
            Ok(case) if !ids.insert(case.patient_id.clone()) => {
                fail(format!("duplicate Patient_ID {}", case.patient_id))
            }
            Ok(case) => cases.push(case),
            Err(message) => fail(message),
        }
    }
    if !bad.is_empty() {
        return Err(IngestError::Rows(bad));
    }
    Ok(cases)
}

pub fn export_dataset_csv(cases: &[SyntheticCase], path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_dataset_csv(cases, std::io::BufWriter::new(file))
}

pub fn import_dataset_csv(path: impl AsRef<Path>) -> Result<Vec<SyntheticCase>, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset_csv(std::io::BufReader::new(file))
}
