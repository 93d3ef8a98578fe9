//! Synthetic corpora with known hallucinated substrings.
//!
//! Each sample is a pure function of `(lang, seed, index, hallucinated)`:
//! a short landmark description built from sentence frames, where some slot
//! fillers are marked as planted hallucinations. Every planted text occurs
//! exactly once in its answer, so exact localization recovers its offsets.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::spans::{char_len, CharSpan, HardLabel, Sample, SoftLabel};

#[derive(Debug, Error, PartialEq)]
pub enum PlantedError {
    #[error("no planted-corpus templates for language {0:?} (have: {SUPPORTED:?})")]
    UnsupportedLanguage(String),
    #[error("corpus size must be at least 1")]
    Empty,
    #[error("zero-hallucination fraction {0} outside [0, 1]")]
    Fraction(f64),
}

pub const SUPPORTED: &[&str] = &["en", "ar", "hi", "de"];

/// Gold probability attached to planted spans.
pub const PLANTED_GOLD_PROBABILITY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Year,
    Height,
    Person,
    Place,
    Count,
}

struct Frame {
    text: &'static str,
    slot: Slot,
}

struct LangPack {
    subjects: &'static [&'static str],
    questions: &'static [&'static str],
    frames: &'static [Frame],
    persons: &'static [&'static str],
    places: &'static [&'static str],
    height_unit: &'static str,
    count_unit: &'static str,
    /// Code point of the digit zero in this script.
    zero: char,
}

const fn f(text: &'static str, slot: Slot) -> Frame {
    Frame { text, slot }
}

static EN: LangPack = LangPack {
    subjects: &[
        "Eiffel Tower",
        "Golden Gate Bridge",
        "Sydney Opera House",
        "Louvre Museum",
        "Brooklyn Bridge",
        "Taj Mahal",
    ],
    questions: &[
        "What do you know about the {subject}?",
        "When was the {subject} completed?",
        "Who designed the {subject}?",
    ],
    frames: &[
        f("The {subject} was completed in {slot}.", Slot::Year),
        f("It was designed by {slot}.", Slot::Person),
        f("The structure stands {slot} tall.", Slot::Height),
        f("It is located in {slot}.", Slot::Place),
        f("Around {slot} arrive every day.", Slot::Count),
    ],
    persons: &[
        "Gustave Eiffel",
        "Joseph Strauss",
        "Jørn Utzon",
        "John Roebling",
        "Ustad Ahmad Lahauri",
    ],
    places: &[
        "Paris",
        "San Francisco",
        "Sydney",
        "New York",
        "Agra",
        "Lyon",
    ],
    height_unit: " meters",
    count_unit: " thousand visitors",
    zero: '0',
};

static AR: LangPack = LangPack {
    subjects: &[
        "برج إيفل",
        "جسر البوابة الذهبية",
        "دار أوبرا سيدني",
        "متحف اللوفر",
        "تاج محل",
    ],
    questions: &[
        "ماذا تعرف عن {subject}؟",
        "متى اكتمل بناء {subject}؟",
        "من صمم {subject}؟",
    ],
    frames: &[
        f("اكتمل بناء {subject} في عام {slot}.", Slot::Year),
        f("صممه المهندس {slot}.", Slot::Person),
        f("يبلغ ارتفاعه {slot}.", Slot::Height),
        f("يقع في مدينة {slot}.", Slot::Place),
        f("يزوره نحو {slot} كل يوم.", Slot::Count),
    ],
    persons: &[
        "غوستاف إيفل",
        "جوزيف شتراوس",
        "يورن أوتزون",
        "أحمد لاهوري",
        "حسن فتحي",
    ],
    places: &["باريس", "القاهرة", "دبي", "روما", "مراكش", "بيروت"],
    height_unit: " مترًا",
    count_unit: " ألف زائر",
    zero: '\u{0660}',
};

static HI: LangPack = LangPack {
    subjects: &["ताजमहल", "कुतुब मीनार", "इंडिया गेट", "लाल किला", "हवा महल"],
    questions: &[
        "{subject} के बारे में बताइए।",
        "{subject} कब बना था?",
        "{subject} का निर्माण किसने करवाया?",
    ],
    frames: &[
        f("{subject} का निर्माण वर्ष {slot} में पूरा हुआ।", Slot::Year),
        f("इसकी रूपरेखा {slot} ने तैयार की थी।", Slot::Person),
        f("इसकी ऊँचाई {slot} है।", Slot::Height),
        f("यह {slot} शहर में स्थित है।", Slot::Place),
        f("यहाँ प्रतिदिन लगभग {slot} आते हैं।", Slot::Count),
    ],
    persons: &[
        "उस्ताद अहमद लाहौरी",
        "एडविन लुटियंस",
        "लाल चंद उस्ताद",
        "मीर मोमिन",
    ],
    places: &["आगरा", "दिल्ली", "जयपुर", "हैदराबाद", "लखनऊ", "वाराणसी"],
    height_unit: " मीटर",
    count_unit: " हज़ार पर्यटक",
    zero: '\u{0966}',
};

static DE: LangPack = LangPack {
    subjects: &[
        "Kölner Dom",
        "Brandenburger Tor",
        "Schloss Neuschwanstein",
        "Berliner Fernsehturm",
    ],
    questions: &[
        "Was weißt du über {subject}?",
        "Wann wurde {subject} fertiggestellt?",
    ],
    frames: &[
        f("{subject} wurde im Jahr {slot} fertiggestellt.", Slot::Year),
        f("Entworfen wurde das Bauwerk von {slot}.", Slot::Person),
        f("Es ist {slot} hoch.", Slot::Height),
        f("Es befindet sich in {slot}.", Slot::Place),
        f("Täglich kommen etwa {slot}.", Slot::Count),
    ],
    persons: &[
        "Ernst Friedrich Zwirner",
        "Carl Gotthard Langhans",
        "Eduard Riedel",
        "Hermann Henselmann",
    ],
    places: &["Köln", "Berlin", "Füssen", "München", "Hamburg"],
    height_unit: " Meter",
    count_unit: " tausend Besucher",
    zero: '0',
};

fn pack(lang: &str) -> Result<&'static LangPack, PlantedError> {
    match lang.to_ascii_lowercase().as_str() {
        "en" => Ok(&EN),
        "ar" => Ok(&AR),
        "hi" => Ok(&HI),
        "de" => Ok(&DE),
        _ => Err(PlantedError::UnsupportedLanguage(lang.to_owned())),
    }
}

fn rng_for(seed: u64, lang: &str, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(lang.as_bytes());
    h.update([0u8]);
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn localized_digits(n: u32, zero: char) -> String {
    n.to_string()
        .chars()
        .map(|d| char::from_u32(zero as u32 + d.to_digit(10).unwrap()).unwrap())
        .collect()
}

fn fill(slot: Slot, p: &LangPack, rng: &mut ChaCha8Rng) -> String {
    match slot {
        Slot::Year => localized_digits(rng.random_range(1700..2021), p.zero),
        Slot::Height => format!(
            "{}{}",
            localized_digits(rng.random_range(12..999), p.zero),
            p.height_unit
        ),
        Slot::Count => format!(
            "{}{}",
            localized_digits(rng.random_range(2..99), p.zero),
            p.count_unit
        ),
        Slot::Person => p.persons.choose(rng).unwrap().to_string(),
        Slot::Place => p.places.choose(rng).unwrap().to_string(),
    }
}

/// Sample id for position `index` in a corpus of `lang`.
pub fn planted_id(lang: &str, index: usize) -> String {
    format!("planted-{}-{index:05}", lang.to_ascii_lowercase())
}

fn parse_index(id: &str) -> Option<(String, usize)> {
    let rest = id.strip_prefix("planted-")?;
    let (lang, idx) = rest.rsplit_once('-')?;
    Some((lang.to_owned(), idx.parse().ok()?))
}

/// One planted sample and its hallucinated spans, in answer order.
pub fn planted_sample(
    lang: &str,
    seed: u64,
    index: usize,
    hallucinated: bool,
) -> Result<(Sample, Vec<CharSpan>), PlantedError> {
    let p = pack(lang)?;
    let key = lang.to_ascii_lowercase();
    let mut rng = rng_for(seed, &key, "sample", index as u64);
    let subject = *p.subjects.choose(&mut rng).unwrap();
    let question = p
        .questions
        .choose(&mut rng)
        .unwrap()
        .replace("{subject}", subject);
    // recovery tells the variants apart by text, so they must never coincide
    let clean_answer = if hallucinated {
        Some(planted_sample(lang, seed, index, false)?.0.answer)
    } else {
        None
    };

    loop {
        let k = rng.random_range(2..=p.frames.len().min(4));
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, p.frames.len(), k).into_vec();
        chosen.sort_unstable();
        let n_planted = if hallucinated {
            rng.random_range(1..=k.min(3))
        } else {
            0
        };
        let mut planted_slots: Vec<usize> = (0..k).collect();
        planted_slots.shuffle(&mut rng);
        planted_slots.truncate(n_planted);

        let mut answer = String::new();
        let mut planted: Vec<(CharSpan, String)> = Vec::new();
        for (pos, &fi) in chosen.iter().enumerate() {
            let frame = &p.frames[fi];
            let value = fill(frame.slot, p, &mut rng);
            let text = frame.text.replace("{subject}", subject);
            let (before, after) = text.split_once("{slot}").expect("frame has a slot");
            if !answer.is_empty() {
                answer.push(' ');
            }
            answer.push_str(before);
            let start = char_len(&answer);
            answer.push_str(&value);
            if planted_slots.contains(&pos) {
                let span =
                    CharSpan::new(start, start + char_len(&value)).expect("non-empty filler");
                planted.push((span, value));
            }
            answer.push_str(after);
        }

        let unique = planted
            .iter()
            .all(|(_, text)| answer.matches(text.as_str()).count() == 1);
        if unique && clean_answer.as_ref() != Some(&answer) {
            let spans: Vec<CharSpan> = planted.into_iter().map(|(s, _)| s).collect();
            let sample = Sample::new(planted_id(lang, index), lang, question, answer)
                .expect("answer is non-empty")
                .with_gold(
                    Some(
                        spans
                            .iter()
                            .map(|&s| SoftLabel::new(s, PLANTED_GOLD_PROBABILITY).unwrap())
                            .collect(),
                    ),
                    Some(spans.iter().map(|&s| HardLabel::from(s)).collect()),
                )
                .expect("planted spans are in bounds");
            return Ok((sample, spans));
        }
    }
}

/// `n` samples for `lang`; exactly `round(zero_fraction * n)` of them carry
/// no planted span. Gold labels are attached to every sample.
pub fn generate_planted_corpus(
    n: usize,
    lang: &str,
    seed: u64,
    zero_fraction: f64,
) -> Result<Vec<Sample>, PlantedError> {
    if n == 0 {
        return Err(PlantedError::Empty);
    }
    if !(0.0..=1.0).contains(&zero_fraction) {
        return Err(PlantedError::Fraction(zero_fraction));
    }
    pack(lang)?;
    let n_zero = (zero_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &lang.to_ascii_lowercase(), "zero", 0));
    let mut clean = vec![false; n];
    for &i in &order[..n_zero] {
        clean[i] = true;
    }
    (0..n)
        .map(|i| planted_sample(lang, seed, i, !clean[i]).map(|(s, _)| s))
        .collect()
}

/// Planted spans of a sample produced by [`generate_planted_corpus`] with
/// `seed`. Anything else (foreign ids, other seeds, edited answers) yields
/// no spans.
pub fn recover_planted(sample: &Sample, seed: u64) -> Vec<CharSpan> {
    let Some((lang, index)) = parse_index(&sample.id) else {
        return Vec::new();
    };
    for hallucinated in [true, false] {
        if let Ok((candidate, spans)) = planted_sample(&lang, seed, index, hallucinated) {
            if candidate.answer == sample.answer && candidate.question == sample.question {
                return spans;
            }
        }
    }
    Vec::new()
}
