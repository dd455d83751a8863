//! Seeded generator for a MultiWOZ-style corpus: entity database, ontology,
//! goal-annotated templated dialogues and a word-vector file, all in the
//! formats read by [`crate::corpus`] and [`crate::text`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::corpus::DOMAINS;
use crate::io::write_atomic;
use crate::text::tokenize;

const AREAS: [&str; 5] = ["centre", "north", "south", "east", "west"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const FOODS: [&str; 10] = [
    "chinese", "italian", "indian", "british", "french", "thai", "european", "japanese", "korean", "mexican",
];
const HOTEL_TYPES: [&str; 2] = ["hotel", "guesthouse"];
const ATTRACTION_TYPES: [&str; 8] = [
    "museum", "college", "park", "theatre", "nightclub", "church", "cinema", "gallery",
];
const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const STATIONS: [&str; 8] = [
    "cambridge", "london kings cross", "ely", "norwich", "peterborough", "stansted airport", "leicester", "bishops stortford",
];
const NAME_FIRST: [&str; 20] = [
    "golden", "royal", "little", "old", "red", "blue", "green", "silver", "grand", "happy", "lucky", "river", "city",
    "park", "garden", "corner", "copper", "rose", "oak", "station",
];
const NAME_SECOND: [&str; 16] = [
    "wok", "kitchen", "house", "bistro", "garden", "palace", "lodge", "inn", "star", "bell", "tree", "bridge", "mill",
    "court", "table", "view",
];
const DEPARTMENTS: [&str; 6] = ["cardiology", "neurology", "oncology", "paediatrics", "emergency", "urology"];
const CAR_TYPES: [&str; 6] = ["toyota", "ford", "skoda", "honda", "tesla", "volvo"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub dialogues: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    /// Share of dialogues written without a goal annotation.
    pub goalless_per_mille: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dialogues: 10_438,
            seed: 7,
            embedding_dim: 50,
            goalless_per_mille: 10,
        }
    }
}

/// Generated corpus as JSON values ready to be written.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dialogues: Value,
    pub ontology: BTreeMap<String, BTreeSet<String>>,
    pub database: BTreeMap<String, Vec<BTreeMap<String, String>>>,
    pub embeddings: String,
}

type Record = BTreeMap<String, String>;

fn rec(pairs: &[(&str, String)]) -> Record {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn phone<R: Rng>(rng: &mut R) -> String {
    format!("01223 {:06}", rng.random_range(0..1_000_000))
}

fn postcode<R: Rng>(rng: &mut R) -> String {
    format!("cb{} {}{}", rng.random_range(1..6), rng.random_range(1..10), ["aa", "ab", "bd", "dp", "eh", "jw"].choose(rng).unwrap())
}

fn reference<R: Rng>(rng: &mut R) -> String {
    const ALNUM: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ0123456789";
    (0..8).map(|_| *ALNUM.choose(rng).unwrap() as char).collect()
}

fn time(minutes: u32) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

struct Generator {
    rng: ChaCha8Rng,
    db: BTreeMap<String, Vec<Record>>,
    ontology: BTreeMap<String, BTreeSet<String>>,
}

impl Generator {
    fn new(seed: u64) -> Self {
        let mut g = Generator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            db: BTreeMap::new(),
            ontology: BTreeMap::new(),
        };
        g.build_database();
        g
    }

    fn note(&mut self, domain: &str, slot: &str, value: &str) {
        self.ontology
            .entry(format!("{domain}-{slot}"))
            .or_default()
            .insert(value.to_string());
    }

    fn unique_names(&mut self, n: usize, suffix: &str) -> Vec<String> {
        let mut all: Vec<String> = NAME_FIRST
            .iter()
            .flat_map(|a| NAME_SECOND.iter().map(move |b| format!("{a} {b}")))
            .collect();
        all.shuffle(&mut self.rng);
        all.truncate(n);
        all.into_iter()
            .map(|n| if suffix.is_empty() { n } else { format!("{n} {suffix}") })
            .collect()
    }

    fn build_database(&mut self) {
        let mut restaurants = Vec::new();
        for name in self.unique_names(110, "") {
            let r = rec(&[
                ("name", name),
                ("area", AREAS.choose(&mut self.rng).unwrap().to_string()),
                ("food", FOODS.choose(&mut self.rng).unwrap().to_string()),
                ("pricerange", PRICES.choose(&mut self.rng).unwrap().to_string()),
                ("phone", phone(&mut self.rng)),
                ("postcode", postcode(&mut self.rng)),
            ]);
            restaurants.push(r);
        }
        let mut hotels = Vec::new();
        for name in self.unique_names(33, "hotel") {
            hotels.push(rec(&[
                ("name", name),
                ("area", AREAS.choose(&mut self.rng).unwrap().to_string()),
                ("pricerange", PRICES.choose(&mut self.rng).unwrap().to_string()),
                ("type", HOTEL_TYPES.choose(&mut self.rng).unwrap().to_string()),
                ("stars", self.rng.random_range(2..6).to_string()),
                ("parking", ["yes", "no"].choose(&mut self.rng).unwrap().to_string()),
                ("phone", phone(&mut self.rng)),
                ("postcode", postcode(&mut self.rng)),
            ]));
        }
        let mut attractions = Vec::new();
        for name in self.unique_names(79, "") {
            let kind = ATTRACTION_TYPES.choose(&mut self.rng).unwrap().to_string();
            attractions.push(rec(&[
                ("name", format!("{name} {kind}")),
                ("area", AREAS.choose(&mut self.rng).unwrap().to_string()),
                ("type", kind),
                ("entrancefee", ["free", "2 pounds", "5 pounds"].choose(&mut self.rng).unwrap().to_string()),
                ("phone", phone(&mut self.rng)),
                ("postcode", postcode(&mut self.rng)),
            ]));
        }
        let mut trains = Vec::new();
        let mut ids = BTreeSet::new();
        for dep in STATIONS {
            for dest in STATIONS {
                if dep == dest || (dep != "cambridge" && dest != "cambridge") {
                    continue;
                }
                for day in DAYS {
                    for hour in (5..23).step_by(3) {
                        let leave = hour * 60 + self.rng.random_range(0..4) * 15 + 1;
                        let duration = self.rng.random_range(17..90);
                        let id = loop {
                            let id = format!("TR{:04}", self.rng.random_range(1000..10000));
                            if ids.insert(id.clone()) {
                                break id;
                            }
                        };
                        trains.push(rec(&[
                            ("trainid", id),
                            ("departure", dep.to_string()),
                            ("destination", dest.to_string()),
                            ("day", day.to_string()),
                            ("leaveat", time(leave)),
                            ("arriveby", time(leave + duration)),
                            ("price", format!("{}.{:02} pounds", self.rng.random_range(4..40), self.rng.random_range(0..100))),
                            ("duration", format!("{duration} minutes")),
                        ]));
                    }
                }
            }
        }
        let taxis: Vec<Record> = (0..6)
            .map(|i| rec(&[("id", format!("taxi{i}")), ("type", CAR_TYPES[i].to_string()), ("phone", format!("07{:09}", 100_000_000 + i * 7919))]))
            .collect();
        let police = vec![rec(&[
            ("name", "parkside police station".to_string()),
            ("phone", "01223 358966".to_string()),
            ("postcode", "cb1 1jg".to_string()),
        ])];
        let hospital: Vec<Record> = DEPARTMENTS
            .iter()
            .enumerate()
            .map(|(i, d)| rec(&[("department", d.to_string()), ("phone", format!("01223 {:06}", 216_000 + i * 37))]))
            .collect();

        for (domain, records) in [
            ("restaurant", restaurants),
            ("hotel", hotels),
            ("attraction", attractions),
            ("train", trains),
            ("taxi", taxis),
            ("police", police),
            ("hospital", hospital),
        ] {
            for r in &records {
                for (slot, value) in r.iter().filter(|(s, _)| *s != "id") {
                    self.note(domain, slot, value);
                }
            }
            self.db.insert(domain.to_string(), records);
        }
        for d in ["restaurant", "hotel", "train", "taxi"] {
            self.note(d, "people", "1");
        }
        for day in DAYS {
            self.note("restaurant", "day", day);
            self.note("hotel", "day", day);
        }
        self.note("taxi", "leaveat", "10:15");
        for d in DOMAINS {
            assert!(self.ontology.keys().any(|k| k.starts_with(&format!("{d}-"))));
        }
    }

    fn pick<'a>(&mut self, options: &[&'a str]) -> &'a str {
        options.choose(&mut self.rng).unwrap()
    }

    fn pick_record(&mut self, domain: &str) -> Record {
        self.db[domain].choose(&mut self.rng).unwrap().clone()
    }

    fn count_matching(&self, domain: &str, constraints: &[(&str, &str)]) -> usize {
        self.db[domain]
            .iter()
            .filter(|r| constraints.iter().all(|(k, v)| r.get(*k).map(String::as_str) == Some(*v)))
            .count()
    }

    fn booking_ref(&mut self, domain: &str) -> String {
        let r = reference(&mut self.rng);
        self.note(domain, "reference", &r);
        r
    }

    fn restaurant(&mut self, turns: &mut Vec<(bool, String)>, goal: &mut Value) {
        let r = self.pick_record("restaurant");
        let (food, area, price, name) = (&r["food"], &r["area"], &r["pricerange"], &r["name"]);
        let n = self.count_matching("restaurant", &[("food", food), ("area", area)]);
        let open = self.pick(&[
            "i am looking for a {food} restaurant in the {area} .",
            "i want to find a place serving {food} food in the {area} of town .",
            "can you help me find a {food} restaurant ? i would like it in the {area} .",
            "hi , i need a restaurant that serves {food} food in the {area} area .",
        ]);
        turns.push((true, open.replace("{food}", food).replace("{area}", area)));
        let ask = self.pick(&[
            "there are {n} {food} restaurants in the {area} . what price range would you like ?",
            "i have {n} options for you . do you have a price range in mind ?",
            "sure , what price range are you looking for ?",
        ]);
        turns.push((false, ask.replace("{n}", &n.to_string()).replace("{food}", food).replace("{area}", area)));
        let say_price = self.pick(&[
            "something in the {price} price range please .",
            "i would like a {price} one .",
            "{price} , please .",
        ]);
        turns.push((true, say_price.replace("{price}", price)));
        let offer = self.pick(&[
            "{name} is a {price} {food} restaurant in the {area} .",
            "how about {name} ? it serves {food} food and is {price} .",
            "i recommend {name} , a {price} restaurant in the {area} .",
        ]);
        turns.push((false, offer.replace("{name}", name).replace("{price}", price).replace("{food}", food).replace("{area}", area)));
        let mut requested = Vec::new();
        let mut constraints = json!({"food": food, "area": area, "pricerange": price});
        match self.rng.random_range(0..3) {
            0 => {
                turns.push((true, self.pick(&["what is their phone number ?", "can i have the phone number please ?"]).to_string()));
                turns.push((false, format!("the phone number is {} .", r["phone"])));
                requested.push("phone");
            }
            1 => {
                turns.push((true, "could you give me the phone number and postcode ?".to_string()));
                turns.push((false, format!("sure , the phone number is {} and the postcode is {} .", r["phone"], r["postcode"])));
                requested.extend(["phone", "postcode"]);
            }
            _ => {
                let people = self.rng.random_range(1..9).to_string();
                let day = self.pick(&DAYS).to_string();
                turns.push((true, format!("please book a table for {people} people on {day} .")));
                let reference = self.booking_ref("restaurant");
                let done = self.pick(&[
                    "booking was successful . your reference number is {ref} .",
                    "i have booked it . the reference number is {ref} .",
                ]);
                turns.push((false, done.replace("{ref}", &reference)));
                constraints["day"] = json!(day);
                requested.push("reference");
            }
        }
        goal["restaurant"] = json!({"constraints": constraints, "requested": requested});
    }

    fn hotel(&mut self, turns: &mut Vec<(bool, String)>, goal: &mut Value) {
        let r = self.pick_record("hotel");
        let (area, price, kind, stars, name) = (&r["area"], &r["pricerange"], &r["type"], &r["stars"], &r["name"]);
        let open = self.pick(&[
            "i need a place to stay in the {area} .",
            "i am looking for a {kind} in the {area} .",
            "can you find me a {price} place to stay in the {area} ?",
        ]);
        turns.push((true, open.replace("{area}", area).replace("{kind}", kind).replace("{price}", price)));
        turns.push((false, self.pick(&["how many stars would you like ?", "do you have a star rating in mind ?"]).to_string()));
        turns.push((true, format!("{stars} stars and {price} please .")));
        let offer = self.pick(&[
            "{name} is a {stars} star {kind} in the {area} .",
            "i recommend {name} . it is {price} and has {stars} stars .",
        ]);
        turns.push((false, offer.replace("{name}", name).replace("{stars}", stars).replace("{kind}", kind).replace("{area}", area).replace("{price}", price)));
        let mut requested = vec![];
        if self.rng.random_bool(0.5) {
            turns.push((true, "what is the postcode ?".to_string()));
            turns.push((false, format!("the postcode is {} .", r["postcode"])));
            requested.push("postcode");
        } else {
            let nights = self.rng.random_range(1..5);
            turns.push((true, format!("book it for {nights} nights please .")));
            let reference = self.booking_ref("hotel");
            turns.push((false, format!("you are booked . reference number : {reference} .")));
            requested.push("reference");
        }
        goal["hotel"] = json!({
            "constraints": {"area": area, "pricerange": price, "stars": stars},
            "requested": requested
        });
    }

    fn attraction(&mut self, turns: &mut Vec<(bool, String)>, goal: &mut Value) {
        let r = self.pick_record("attraction");
        let (area, kind, name) = (&r["area"], &r["type"], &r["name"]);
        let open = self.pick(&[
            "are there any {kind} attractions in the {area} ?",
            "i want to visit a {kind} in the {area} .",
            "what {kind} can i visit in the {area} of town ?",
        ]);
        turns.push((true, open.replace("{kind}", kind).replace("{area}", area)));
        turns.push((false, format!("{name} is in the {area} . would you like more information ?")));
        let mut requested = vec![];
        if self.rng.random_bool(0.5) {
            turns.push((true, "yes , what is the entrance fee and phone number ?".to_string()));
            turns.push((false, format!("the entrance fee is {} and the phone is {} .", r["entrancefee"], r["phone"])));
            requested.extend(["entrancefee", "phone"]);
        } else {
            turns.push((true, "yes , what is the postcode ?".to_string()));
            turns.push((false, format!("their postcode is {} .", r["postcode"])));
            requested.push("postcode");
        }
        goal["attraction"] = json!({"constraints": {"area": area, "type": kind}, "requested": requested});
    }

    fn train(&mut self, turns: &mut Vec<(bool, String)>, goal: &mut Value) {
        let r = self.pick_record("train");
        let (dep, dest, day) = (&r["departure"], &r["destination"], &r["day"]);
        // a goal time at most an hour before the chosen train
        let leave = &r["leaveat"];
        let mins: u32 = leave[..2].parse::<u32>().unwrap() * 60 + leave[3..].parse::<u32>().unwrap();
        let want = time(mins.saturating_sub(self.rng.random_range(1..60)));
        let open = self.pick(&[
            "i need a train from {dep} to {dest} .",
            "i am looking for a train going to {dest} from {dep} .",
            "can you help me find a train to {dest} ? i will leave from {dep} .",
        ]);
        turns.push((true, open.replace("{dep}", dep).replace("{dest}", dest)));
        turns.push((false, self.pick(&["what day will you be travelling ?", "what day would you like to travel ?"]).to_string()));
        turns.push((true, format!("on {day} , leaving after {want} .")));
        let offer = self.pick(&[
            "{id} leaves at {leave} and arrives by {arrive} .",
            "i have train {id} departing at {leave} . it arrives at {arrive} .",
        ]);
        turns.push((false, offer.replace("{id}", &r["trainid"]).replace("{leave}", leave).replace("{arrive}", &r["arriveby"])));
        let mut requested = vec![];
        if self.rng.random_bool(0.5) {
            turns.push((true, "what is the price and travel time ?".to_string()));
            turns.push((false, format!("the price is {} and the journey takes {} .", r["price"], r["duration"])));
            requested.extend(["price", "duration"]);
        } else {
            let people = self.rng.random_range(1..6);
            turns.push((true, format!("please book {people} tickets .")));
            let reference = self.booking_ref("train");
            turns.push((false, format!("booked . the total is {} and the reference is {reference} .", r["price"])));
            requested.push("reference");
        }
        goal["train"] = json!({
            "constraints": {"departure": dep, "destination": dest, "day": day, "leaveat": want},
            "requested": requested
        });
    }

    fn taxi(&mut self, turns: &mut Vec<(bool, String)>, goal: &mut Value) {
        let t = self.pick_record("taxi");
        turns.push((true, "i also need a taxi to get there .".to_string()));
        turns.push((false, "what time would you like to leave ?".to_string()));
        turns.push((true, "at 10:15 please .".to_string()));
        turns.push((false, format!("a {} is booked for you . the contact number is {} .", t["type"], t["phone"])));
        goal["taxi"] = json!({"constraints": {"leaveat": "10:15"}, "requested": ["phone"]});
    }

    fn dialogue(&mut self, index: usize, with_goal: bool) -> Value {
        let mut turns: Vec<(bool, String)> = Vec::new();
        let mut goal = json!({});
        let mut domains: Vec<&str> = vec![*["restaurant", "hotel", "attraction", "train"].choose(&mut self.rng).unwrap()];
        if self.rng.random_bool(0.35) {
            let second = *["restaurant", "hotel", "attraction", "train"].choose(&mut self.rng).unwrap();
            if second != domains[0] {
                domains.push(second);
            }
        }
        for (i, d) in domains.iter().enumerate() {
            if i > 0 {
                turns.push((true, "i also need some more help .".to_string()));
                turns.push((false, "sure , what else can i do for you ?".to_string()));
            }
            match *d {
                "restaurant" => self.restaurant(&mut turns, &mut goal),
                "hotel" => self.hotel(&mut turns, &mut goal),
                "attraction" => self.attraction(&mut turns, &mut goal),
                _ => self.train(&mut turns, &mut goal),
            }
        }
        if domains[0] != "train" && self.rng.random_bool(0.15) {
            self.taxi(&mut turns, &mut goal);
        }
        turns.push((true, self.pick(&["thank you , goodbye .", "that is all i need , thanks .", "thanks for your help !"]).to_string()));
        turns.push((false, self.pick(&["you are welcome . goodbye !", "have a nice day .", "glad i could help . goodbye ."]).to_string()));
        let turns: Vec<Value> = turns
            .into_iter()
            .map(|(user, text)| json!({"speaker": if user { "user" } else { "system" }, "text": text}))
            .collect();
        let mut d = json!({"dialogue_id": format!("SNG{index:05}.json"), "turns": turns});
        if with_goal {
            d["goal"] = goal;
        }
        d
    }
}

/// Word vectors: tokens that fill the same slot share a cluster centre, so
/// slot values of one kind are closer to each other than to other words.
fn embeddings(vocab: &BTreeMap<String, String>, dim: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut centres: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut out = String::new();
    writeln!(out, "{} {dim}", vocab.len()).unwrap();
    for (token, cluster) in vocab {
        let centre = centres
            .entry(cluster.as_str())
            .or_insert_with(|| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .clone();
        out.push_str(token);
        for c in centre {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = if cluster == "_" { noise } else { 0.7 * c + 0.5 * noise };
            write!(out, " {v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut g = Generator::new(cfg.seed);
    let dialogues: Vec<Value> = (0..cfg.dialogues)
        .map(|i| {
            let with_goal = g.rng.random_range(0..1000) >= cfg.goalless_per_mille;
            g.dialogue(i, with_goal)
        })
        .collect();

    let mut vocab: BTreeMap<String, String> = BTreeMap::new();
    for d in &dialogues {
        for t in d["turns"].as_array().unwrap() {
            for tok in tokenize(t["text"].as_str().unwrap()) {
                vocab.entry(tok).or_insert_with(|| "_".into());
            }
        }
    }
    for (key, values) in &g.ontology {
        let slot = key.split_once('-').map_or(key.as_str(), |(_, s)| s);
        for v in values {
            for tok in tokenize(v) {
                vocab.insert(tok, slot.to_string());
            }
        }
        vocab.insert(key.clone(), format!("placeholder-{slot}"));
    }
    SynthCorpus {
        embeddings: embeddings(&vocab, cfg.embedding_dim, cfg.seed),
        dialogues: Value::Array(dialogues),
        ontology: g.ontology,
        database: g.db,
    }
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

impl SynthCorpus {
    /// Writes `dialogues.json`, `ontology.json`, `db.json` and
    /// `embeddings.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        write_atomic(&dir.join("dialogues.json"), pretty(&self.dialogues).as_bytes())?;
        write_atomic(&dir.join("ontology.json"), pretty(&self.ontology).as_bytes())?;
        write_atomic(&dir.join("db.json"), pretty(&self.database).as_bytes())?;
        write_atomic(&dir.join("embeddings.txt"), self.embeddings.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_dialogues, Database, Delexicalizer, Ontology};

    fn small() -> SynthCorpus {
        generate(&SynthConfig {
            dialogues: 60,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn outputs_parse_with_the_corpus_loaders() {
        let c = small();
        let dialogues = parse_dialogues(&c.dialogues.to_string(), "synth").unwrap();
        assert_eq!(dialogues.len(), 60);
        let ont = Ontology::from_json(&serde_json::to_string(&c.ontology).unwrap()).unwrap();
        let db = Database::from_json(&serde_json::to_string(&c.database).unwrap()).unwrap();
        for d in DOMAINS {
            assert!(!db.records(d).is_empty(), "{d}");
        }
        for d in &dialogues {
            if let Some(goal) = &d.goal {
                goal.validate(&ont).unwrap();
            }
        }
        assert!(Delexicalizer::new(&ont).unwrap().value_count() > 100);
    }

    #[test]
    fn generation_is_seeded() {
        let a = small();
        let b = small();
        assert_eq!(a.dialogues, b.dialogues);
        assert_eq!(a.embeddings, b.embeddings);
        let c = generate(&SynthConfig {
            dialogues: 60,
            seed: 8,
            ..SynthConfig::default()
        });
        assert_ne!(a.dialogues, c.dialogues);
    }

    #[test]
    fn embedding_file_covers_placeholders() {
        let c = small();
        let header = c.embeddings.lines().next().unwrap();
        assert!(header.ends_with(" 50"));
        assert!(c.embeddings.lines().any(|l| l.starts_with("restaurant-phone ")));
    }
}
