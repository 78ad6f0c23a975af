//! Synthetic conversations and a storyboard-driven backend.
//!
//! [`generate`] builds a transcript together with a [`Storyboard`] saying
//! which narrative, sub-topic and fact each turn belongs to. The
//! [`SimulatedBackend`] answers every prompt kind by reading the rendered
//! bindings and consulting the storyboard, so its output is a pure function
//! of the prompt. Wrapping it in a recording backend yields script tables
//! for [`ScriptedBackend`](crate::reasoner::ScriptedBackend).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Duration as Days, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use std::sync::Arc;

use crate::eval::{evaluate_data, query, EvalOptions, Probe, RunData};
use crate::orchestrator::{run_replay, ConsolidationPolicy, Engine, EngineConfig};
use crate::reasoner::literal::to_python_literal;
use crate::reasoner::{Backend, PromptKind, PromptRequest, ReasonerError, RecordingBackend, ScriptTable};
use crate::retrieval::RetrieverKind;
use crate::render::{normalize_ws, parse_excerpt, turn_tags};
use crate::transcript::{format_datetime, EvalQuestion, QuestionCategory, Session, Transcript, Turn};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPlan {
    pub owner: String,
    pub topic: String,
    pub subtopic: String,
    /// The factual sentence a binding copies; `None` for small talk.
    pub excerpt: Option<String>,
    pub fact: Option<[String; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub owner: String,
    /// Headline candidates in preference order.
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPlan {
    pub targets: Vec<Target>,
    pub answer: String,
    pub evidence: Vec<String>,
    pub patterns: Vec<[Option<String>; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Storyboard {
    pub turns: BTreeMap<String, TurnPlan>,
    /// Topic renames proposed at the first consolidation of a narrative.
    pub renames: BTreeMap<String, String>,
    pub questions: BTreeMap<String, QuestionPlan>,
    #[serde(skip)]
    by_text: HashMap<String, String>,
}

impl Storyboard {
    pub fn index(&mut self, t: &Transcript) {
        self.by_text = t.replay().map(|turn| (normalize_ws(&turn.text), turn.turn_id.clone())).collect();
    }
}

pub struct SimulatedBackend {
    board: Storyboard,
}

impl SimulatedBackend {
    pub fn new(mut board: Storyboard, transcript: &Transcript) -> Self {
        board.index(transcript);
        Self { board }
    }

    fn plan(&self, id: &str) -> Option<&TurnPlan> {
        self.board.turns.get(id)
    }

    fn excerpt_line(&self, line: &str, id: &str, plan: &TurnPlan) -> Option<String> {
        let excerpt = plan.excerpt.as_ref()?;
        let p = parse_excerpt(line);
        let ts = p.timestamp.unwrap_or_default();
        let speaker = p.speaker.unwrap_or_else(|| plan.owner.clone());
        Some(format!("[{id}] ({ts}) {speaker}: {excerpt}"))
    }

    fn tagged_lines<'a>(&'a self, text: &'a str) -> impl Iterator<Item = (&'a str, String, &'a TurnPlan)> + 'a {
        text.lines().filter_map(move |line| {
            let id = turn_tags(line).into_iter().next()?;
            let plan = self.plan(&id)?;
            Some((line, id, plan))
        })
    }

    fn current_name(&self, headlines: &BTreeSet<(String, String)>, owner: &str, names: &[String]) -> Option<String> {
        let mut cands: Vec<String> = Vec::new();
        for n in names {
            cands.push(n.clone());
            if let Some(r) = self.board.renames.get(n) {
                cands.push(r.clone());
            }
        }
        cands.into_iter().find(|n| headlines.contains(&(owner.to_string(), n.clone())))
    }

    fn story_init(&self, req: &PromptRequest) -> String {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut content: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        for (line, id, plan) in self.tagged_lines(req.binding("conv")) {
            let Some(x) = self.excerpt_line(line, &id, plan) else { continue };
            let key = (plan.owner.clone(), plan.topic.clone());
            if !order.contains(&key) {
                order.push(key.clone());
            }
            content.entry(key).or_default().push(x);
        }
        let stories: Vec<Value> = order
            .iter()
            .map(|k| json!({"owner": k.0, "topic": k.1, "content": content[k]}))
            .collect();
        to_python_literal(&Value::Array(stories))
    }

    fn binding(&self, req: &PromptRequest) -> String {
        let heads = parse_headlines(req.binding("headlines"));
        let mut out = Vec::new();
        let mut created: BTreeSet<(String, String)> = BTreeSet::new();
        for (line, id, plan) in self.tagged_lines(req.binding("new_conv")) {
            let Some(x) = self.excerpt_line(line, &id, plan) else { continue };
            let mut all = heads.clone();
            all.extend(created.iter().cloned());
            let (action, topic) = match self.current_name(&all, &plan.owner, std::slice::from_ref(&plan.topic)) {
                Some(t) => ("extend_story", t),
                None => {
                    created.insert((plan.owner.clone(), plan.topic.clone()));
                    ("create_new_story", plan.topic.clone())
                }
            };
            out.push(json!({"message_excerpt": x, "action": action, "topic": topic, "owner": plan.owner}));
        }
        to_python_literal(&Value::Array(out))
    }

    fn items<'a>(&'a self, req: &'a PromptRequest) -> Vec<(usize, String, &'a TurnPlan)> {
        req.binding("new_items_text")
            .lines()
            .filter_map(|line| {
                let (num, _) = line.split_once(". ")?;
                let idx = num.trim().parse::<usize>().ok()?;
                let id = turn_tags(line).into_iter().next()?;
                Some((idx, id.clone(), self.plan(&id)?))
            })
            .collect()
    }

    fn consolidation(&self, req: &PromptRequest) -> String {
        let mut subs: Vec<(String, usize, usize)> = Vec::new();
        for (idx, _, plan) in self.items(req) {
            match subs.last_mut() {
                Some(last) if last.0 == plan.subtopic && last.2 + 1 == idx => last.2 = idx,
                _ => subs.push((plan.subtopic.clone(), idx, idx)),
            }
        }
        let main = req.binding("main_topic");
        let new_topic = self.board.renames.get(main).map(|t| json!(t)).unwrap_or(Value::Null);
        let body = json!({
            "substories": subs.iter().map(|(t, s, e)| json!({"sub_topic": t, "indice": [s, e]})).collect::<Vec<_>>(),
            "new_topic": new_topic,
        });
        format!("```python\n{}\n```", to_python_literal(&body))
    }

    fn semanticization(&self, req: &PromptRequest) -> String {
        let mut facts = Vec::new();
        for (_, id, plan) in self.items(req) {
            if let Some([s, p, o]) = &plan.fact {
                facts.push(json!({"fact": [s, p, o], "timestamp": format!("[{id}]")}));
            }
        }
        to_python_literal(&Value::Array(facts))
    }

    fn coherence(&self, req: &PromptRequest) -> String {
        let heads = parse_headlines(req.binding("headlines"));
        let k: usize = req.binding("k").parse().unwrap_or(2);
        let q = normalize_ws(req.binding("question"));
        let targets: Vec<Target> = if let Some(plan) = self.board.questions.get(&q) {
            plan.targets.clone()
        } else if let Some(plan) = self.board.by_text.get(&q).and_then(|id| self.plan(id)) {
            vec![Target { owner: plan.owner.clone(), names: vec![plan.topic.clone()] }]
        } else {
            Vec::new()
        };
        let mut out = Vec::new();
        for t in targets {
            if let Some(name) = self.current_name(&heads, &t.owner, &t.names) {
                let choice = json!({"owner": t.owner, "topic": name});
                if !out.contains(&choice) {
                    out.push(choice);
                }
            }
        }
        out.truncate(k);
        to_python_literal(&Value::Array(out))
    }

    fn graph(&self, req: &PromptRequest) -> String {
        let q = normalize_ws(req.binding("question"));
        let pats: Vec<Value> = self
            .board
            .questions
            .get(&q)
            .map(|p| p.patterns.iter().map(|[s, pr, o]| json!({"subject": s, "predicate": pr, "object": o})).collect())
            .or_else(|| {
                let plan = self.board.by_text.get(&q).and_then(|id| self.plan(id))?;
                Some(vec![json!({"subject": plan.owner, "predicate": null, "object": null})])
            })
            .unwrap_or_default();
        to_python_literal(&Value::Array(pats))
    }

    fn answer(&self, req: &PromptRequest) -> String {
        let q = normalize_ws(req.binding("question"));
        if let Some(plan) = self.board.questions.get(&q) {
            let memory = format!("{}\n{}", req.binding("full_stories"), req.binding("add_trivas")).to_lowercase();
            let memory = normalize_ws(&memory);
            let found = plan.evidence.iter().all(|id| {
                self.plan(id)
                    .and_then(|p| p.excerpt.as_ref())
                    .is_some_and(|x| memory.contains(&normalize_ws(x).to_lowercase()))
            });
            return if found { plan.answer.clone() } else { "I don't know.".into() };
        }
        if self.board.by_text.contains_key(&q) {
            return "Thanks for sharing that.".into();
        }
        "I don't know.".into()
    }

    fn judge(&self, req: &PromptRequest) -> String {
        let gold = normalize_ws(req.binding("gold_answer")).to_lowercase();
        let generated = normalize_ws(req.binding("generated_answer")).to_lowercase();
        let label = if !gold.is_empty() && generated.contains(&gold) { "CORRECT" } else { "WRONG" };
        format!("The answer {} the gold answer.\n{{\"label\": \"{label}\"}}", if label == "CORRECT" { "matches" } else { "does not match" })
    }
}

/// `{"owner": .., "topic": ..}` objects found in a story list, sub-stories
/// included.
pub fn parse_headlines(list: &str) -> BTreeSet<(String, String)> {
    list.lines()
        .filter_map(|l| {
            let start = l.find('{')?;
            let end = l.rfind('}')?;
            let v: Value = serde_json::from_str(&l[start..=end]).ok()?;
            Some((v.get("owner")?.as_str()?.to_string(), v.get("topic")?.as_str()?.to_string()))
        })
        .collect()
}

impl Backend for SimulatedBackend {
    fn complete(&self, req: &PromptRequest) -> Result<String, ReasonerError> {
        Ok(match req.kind {
            PromptKind::StoryInit => self.story_init(req),
            PromptKind::MemoryBinding => self.binding(req),
            PromptKind::Consolidation => self.consolidation(req),
            PromptKind::Semanticization => self.semanticization(req),
            PromptKind::CoherenceRetrieve => self.coherence(req),
            PromptKind::GraphQueryTranslate => self.graph(req),
            PromptKind::Answer => self.answer(req),
            PromptKind::Judge => self.judge(req),
        })
    }

    fn name(&self) -> &str {
        "simulated"
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct TopicSeed {
    title: &'static str,
    /// Sub-topic title and its facts as (predicate, object).
    subs: [(&'static str, [(&'static str, &'static str); 3]); 3],
}

const TOPICS: [TopicSeed; 10] = [
    TopicSeed {
        title: "Marathon Training and Race Day",
        subs: [
            ("Building Weekly Mileage", [("joined", "a running club called the Dawn Striders"), ("bought", "a pair of carbon-plated racing shoes"), ("finished", "a twenty mile training run along the river")]),
            ("Knee Injury and Physiotherapy", [("strained", "the ligament in the left knee"), ("found", "a physiotherapist who specialises in runners"), ("built", "a strength routine with resistance bands")]),
            ("Finishing the City Marathon", [("finished", "the city marathon in three hours fifty"), ("won", "an age group medal at the finish line"), ("raised", "nine hundred dollars for the children's hospital")]),
        ],
    },
    TopicSeed {
        title: "Starting a Community Garden",
        subs: [
            ("Securing a Garden Plot", [("rented", "an empty lot behind the public library"), ("collected", "forty signatures from the neighbours"), ("bought", "cedar planks for six raised beds")]),
            ("First Harvest", [("planted", "heirloom tomatoes and purple basil"), ("picked", "the first basket of cherry tomatoes"), ("made", "green salsa from the tomatillos")]),
            ("Garden Volunteers", [("organised", "a Saturday watering schedule"), ("taught", "a composting workshop for the school kids"), ("started", "a seed swap stall at the farmers market")]),
        ],
    },
    TopicSeed {
        title: "Learning the Cello",
        subs: [
            ("First Lessons", [("rented", "a student cello from the music shop"), ("found", "a teacher named Mrs Okafor"), ("learned", "the C major scale in first position")]),
            ("Joining an Orchestra", [("joined", "the community orchestra as a second cellist"), ("practised", "the Elgar Enigma Variations every evening"), ("met", "a retired violinist who lends sheet music")]),
            ("Spring Recital", [("played", "a Bach prelude at the spring recital"), ("recorded", "the recital for a grandmother in Accra"), ("bought", "a carbon fibre bow after the recital")]),
        ],
    },
    TopicSeed {
        title: "Adopting a Rescue Dog",
        subs: [
            ("Visiting the Shelter", [("visited", "the Riverside animal shelter twice"), ("met", "a shy greyhound named Pepper"), ("signed", "the adoption papers on a rainy Friday")]),
            ("Settling In at Home", [("bought", "an orthopaedic dog bed for Pepper"), ("built", "a gate for the kitchen doorway"), ("found", "a vet who does house calls")]),
            ("Obedience Classes", [("enrolled", "Pepper in a six week obedience course"), ("taught", "Pepper to sit before crossing the road"), ("won", "the most improved ribbon at graduation")]),
        ],
    },
    TopicSeed {
        title: "Career Change into Nursing",
        subs: [
            ("Applying to Nursing School", [("applied", "to the accelerated nursing program at Westfield"), ("passed", "the entrance exam with a high score"), ("quit", "the accounting job after eleven years")]),
            ("Clinical Placements", [("started", "a placement on the cardiac ward"), ("shadowed", "a charge nurse named Daniel"), ("learned", "to insert an IV line on the first try")]),
            ("Landing the First Job", [("accepted", "a night shift position in paediatrics"), ("bought", "three sets of navy scrubs"), ("joined", "the hospital choir to relax after shifts")]),
        ],
    },
    TopicSeed {
        title: "Family Trip to Portugal",
        subs: [
            ("Planning the Itinerary", [("booked", "a farmhouse in the Douro valley"), ("found", "cheap flights to Lisbon in October"), ("made", "a spreadsheet of train times to Porto")]),
            ("Days in Lisbon", [("rode", "the yellow tram up to the castle"), ("ate", "custard tarts at a bakery in Belem"), ("visited", "the tile museum with the kids")]),
            ("Wine Country Weekend", [("toured", "a port cellar in Vila Nova de Gaia"), ("bought", "a case of white port for the holidays"), ("learned", "how grapes are still stomped by foot")]),
        ],
    },
    TopicSeed {
        title: "Writing a Fantasy Novel",
        subs: [
            ("Outlining the Story", [("outlined", "a trilogy about a lighthouse keeper who hears the sea"), ("named", "the kingdom Varrow after a childhood nickname"), ("drew", "a hand made map of the coastal cities")]),
            ("Writing Group Feedback", [("joined", "a writing group that meets at the cafe on Tuesdays"), ("rewrote", "the opening chapter four times"), ("met", "an editor at the regional book fair")]),
            ("Querying Agents", [("sent", "query letters to twenty literary agents"), ("received", "a full manuscript request from an agency in London"), ("signed", "with an agent named Priya in March")]),
        ],
    },
    TopicSeed {
        title: "Restoring a Vintage Motorcycle",
        subs: [
            ("Buying the Bike", [("bought", "a 1972 Honda CB350 from an estate sale"), ("towed", "the bike home on a borrowed trailer"), ("found", "the original owner's manual in the seat")]),
            ("Rebuilding the Engine", [("rebuilt", "the carburettors with a kit from Japan"), ("replaced", "the cam chain and the valve seals"), ("painted", "the tank in candy apple red")]),
            ("First Ride", [("rode", "the bike to the coast on a Sunday morning"), ("entered", "the bike in the vintage show at the fairgrounds"), ("won", "second place in the restored class")]),
        ],
    },
    TopicSeed {
        title: "Opening a Pottery Studio",
        subs: [
            ("Finding a Space", [("leased", "a former bakery on Elm Street"), ("bought", "a second hand electric kiln"), ("installed", "two pottery wheels and a wedging table")]),
            ("Teaching Classes", [("taught", "a beginner wheel class for eight students"), ("made", "a set of speckled glaze test tiles"), ("hired", "a studio assistant named Luca")]),
            ("The Holiday Market", [("sold", "sixty mugs at the holiday market"), ("launched", "an online shop for the studio"), ("donated", "a set of bowls to the soup kitchen")]),
        ],
    },
    TopicSeed {
        title: "Volunteering with the Sea Rescue",
        subs: [
            ("Crew Training", [("completed", "the sea survival course in cold water"), ("learned", "to tie a bowline with one hand"), ("passed", "the radio operator exam")]),
            ("The Storm Callout", [("joined", "a night callout during the autumn storm"), ("helped", "two kayakers stranded on the sandbar"), ("received", "a commendation from the station manager")]),
            ("Fundraising Swim", [("organised", "a charity swim across the harbour"), ("raised", "enough money for a new thermal camera"), ("swam", "the two kilometre course in the rain")]),
        ],
    },
];

const FILLER: [&str; 24] = [
    "Honestly it has been such a busy few weeks that I barely had time to breathe.",
    "I keep thinking about how much has changed since we last caught up.",
    "Anyway, enough about me for a second, how has your week been going?",
    "It felt a little overwhelming at first but I am really glad I stuck with it.",
    "My sister keeps teasing me that I have found yet another obsession.",
    "The weather has been all over the place, sunny one minute and pouring the next.",
    "I told myself I would take it slow this time and not rush into anything.",
    "Work has been hectic too, so evenings are the only time I get for myself.",
    "I still laugh when I remember how nervous I was about the whole thing.",
    "You always give the best advice, so I wanted to tell you first.",
    "I made a big pot of soup last night and it lasted me the whole week.",
    "Sometimes I wonder whether I am taking on too many projects at once.",
    "My phone is full of photos now, I will have to show you next time.",
    "It is funny how one small decision can lead to so many new things.",
    "I have been sleeping better lately, which probably helps with everything.",
    "The kids think it is hilarious, they ask me about it every single day.",
    "I was up early this morning with a coffee, just thinking it all through.",
    "There were moments I wanted to give up, but the people around me kept me going.",
    "I read somewhere that you need about three months before a habit sticks.",
    "Let me know if you ever want to come along, I think you would love it.",
    "I am trying to keep a little journal so I remember all of this later.",
    "It reminds me of that summer when we both tried learning to surf.",
    "My neighbour brought over lemon cake and we ended up chatting for hours.",
    "I think the trick is to celebrate the small wins along the way.",
];

const LEADS: [&str; 8] = [
    "Guess what,",
    "Big news on my side,",
    "So this week",
    "Quick update:",
    "You will not believe it, but",
    "Remember what I told you before? Well,",
    "Finally,",
    "Oh, and",
];

const REPLIES: [&str; 10] = [
    "That is amazing, I am so happy for you!",
    "Wow, I did not see that coming at all.",
    "You must be so proud of yourself right now.",
    "That sounds like a lot of work, but totally worth it.",
    "I love hearing about this, please keep me posted.",
    "Haha, that is such a you thing to do.",
    "No way, tell me everything next time we meet.",
    "That is really inspiring, honestly.",
    "I hope you are taking some time to rest too.",
    "Sounds like things are really coming together.",
];

/// Shape of a generated scenario.
#[derive(Debug, Clone, Copy)]
pub struct GenSpec {
    pub sessions: usize,
    pub turns_per_session: usize,
    pub topics: usize,
    /// Fact turns per sub-topic block.
    pub block: (usize, usize),
    /// Probability that a fact turn is followed by a small-talk reply.
    pub reply_rate: f64,
    /// Filler sentences per fact turn.
    pub filler: (usize, usize),
    pub questions: usize,
    /// Probability that a narrative is renamed at its first consolidation.
    pub rename_rate: f64,
}

impl GenSpec {
    /// The bundled 60-turn fixture.
    pub fn bundled() -> Self {
        Self {
            sessions: 6,
            turns_per_session: 10,
            topics: 8,
            block: (2, 3),
            reply_rate: 0.25,
            filler: (2, 3),
            questions: 24,
            rename_rate: 0.25,
        }
    }

    /// Small scenarios for randomized property runs.
    pub fn small() -> Self {
        Self {
            sessions: 2,
            turns_per_session: 14,
            topics: 5,
            block: (1, 3),
            reply_rate: 0.3,
            filler: (0, 1),
            questions: 0,
            rename_rate: 0.3,
        }
    }
}

pub const SPEAKERS: [&str; 2] = ["Maya", "Theo"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

/// Builds a transcript and its storyboard from `seed`.
pub fn generate(seed: u64, spec: GenSpec) -> (Transcript, Storyboard) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.sessions * spec.turns_per_session;
    let mut topic_ids: Vec<usize> = (0..TOPICS.len()).collect();
    topic_ids.shuffle(&mut rng);
    topic_ids.truncate(spec.topics.min(TOPICS.len()));
    let owners: Vec<&str> = topic_ids.iter().enumerate().map(|(i, _)| SPEAKERS[i % 2]).collect();

    // progress cursor per topic: (sub index, fact index)
    let mut cursor: Vec<(usize, usize)> = vec![(0, 0); topic_ids.len()];
    let mut board = Storyboard::default();
    for (i, &t) in topic_ids.iter().enumerate() {
        if rng.gen_bool(spec.rename_rate) {
            board.renames.insert(TOPICS[t].title.to_string(), format!("{} and What Came Next", TOPICS[t].title));
        }
        let _ = i;
    }

    struct Draft {
        speaker: String,
        text: String,
        plan: Option<TurnPlan>,
    }
    let mut drafts: Vec<Draft> = Vec::new();
    let mut open: Vec<usize> = (0..topic_ids.len().min(3)).collect();
    let mut next_topic = open.len();
    while drafts.len() < total {
        if open.is_empty() {
            // all topics exhausted: small talk to the end
            let speaker = SPEAKERS[drafts.len() % 2];
            drafts.push(Draft { speaker: speaker.into(), text: format!("{} {}", pick(&mut rng, &FILLER), pick(&mut rng, &REPLIES)), plan: None });
            continue;
        }
        let slot = rng.gen_range(0..open.len());
        let ti = open[slot];
        let seed = &TOPICS[topic_ids[ti]];
        let (sub, _) = cursor[ti];
        let block = rng.gen_range(spec.block.0..=spec.block.1);
        for _ in 0..block {
            if drafts.len() >= total {
                break;
            }
            let (s, f) = cursor[ti];
            if s >= 3 || s != sub {
                break;
            }
            let (sub_title, facts) = seed.subs[s];
            let (pred, obj) = facts[f];
            let owner = owners[ti];
            let excerpt = format!("{} I {pred} {obj}.", pick(&mut rng, &LEADS));
            let mut sentences = vec![excerpt.clone()];
            for _ in 0..rng.gen_range(spec.filler.0..=spec.filler.1) {
                let s = pick(&mut rng, &FILLER);
                if !sentences.iter().any(|x| x == s) {
                    sentences.push(s.to_string());
                }
            }
            // the fact is not always the first sentence
            if sentences.len() > 1 && rng.gen_bool(0.4) {
                sentences.swap(0, 1);
            }
            drafts.push(Draft {
                speaker: owner.into(),
                text: sentences.join(" "),
                plan: Some(TurnPlan {
                    owner: owner.into(),
                    topic: seed.title.into(),
                    subtopic: sub_title.into(),
                    excerpt: Some(excerpt),
                    fact: Some([owner.to_string(), pred.to_string(), obj.to_string()]),
                }),
            });
            if drafts.len() < total && rng.gen_bool(spec.reply_rate) {
                let other = if owner == SPEAKERS[0] { SPEAKERS[1] } else { SPEAKERS[0] };
                drafts.push(Draft { speaker: other.into(), text: format!("{} {}", pick(&mut rng, &REPLIES), pick(&mut rng, &FILLER)), plan: None });
            }
            cursor[ti] = if f == 2 { (s + 1, 0) } else { (s, f + 1) };
        }
        if cursor[ti].0 >= 3 {
            open.remove(slot);
            if next_topic < topic_ids.len() {
                open.push(next_topic);
                next_topic += 1;
            }
        }
    }

    // lay drafts out over sessions, making texts unique
    let start = NaiveDate::from_ymd_opt(2023, 5, 8).expect("valid date").and_hms_opt(13, 56, 0).expect("valid time");
    let mut sessions = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut it = drafts.into_iter();
    let mut at = start;
    for s in 0..spec.sessions {
        let session_id = format!("s{}", s + 1);
        let mut turns = Vec::new();
        for j in 0..spec.turns_per_session {
            let Some(mut d) = it.next() else { break };
            while !seen.insert(normalize_ws(&d.text)) {
                d.text.push_str(" Anyway.");
            }
            let turn_id = format!("s{}t{}", s + 1, j + 1);
            if let Some(p) = d.plan {
                board.turns.insert(turn_id.clone(), p);
            }
            turns.push(Turn { turn_id, session_id: session_id.clone(), speaker: d.speaker, timestamp: at, ordinal: j as u32 + 1, text: d.text });
        }
        sessions.push(Session { session_id, datetime: at, turns });
        at = at + Days::days(rng.gen_range(3..12)) + chrono::Duration::minutes(rng.gen_range(0..300));
    }

    let mut t = Transcript { scenario_id: format!("synthetic-{seed}"), sessions, questions: Vec::new() };
    make_questions(&mut rng, &mut t, &mut board, spec.questions);
    board.index(&t);
    (t, board)
}

fn when(t: &Transcript, id: &str) -> NaiveDateTime {
    t.turn(id).expect("planned turn exists").timestamp
}

fn make_questions(rng: &mut ChaCha8Rng, t: &mut Transcript, board: &mut Storyboard, n: usize) {
    let fact_turns: Vec<(String, TurnPlan)> = board.turns.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if fact_turns.is_empty() {
        return;
    }
    let target = |p: &TurnPlan| Target { owner: p.owner.clone(), names: vec![p.subtopic.clone(), p.topic.clone()] };
    let mut made = 0;
    let mut attempts = 0;
    while made < n && attempts < n * 20 {
        attempts += 1;
        let (id, p) = &fact_turns[rng.gen_range(0..fact_turns.len())];
        let [s, pred, obj] = p.fact.clone().expect("fact turns carry facts");
        let kind = made % 4;
        let (text, answer, evidence, category, targets) = match kind {
            0 | 3 => (
                format!("What has {s} {pred} as part of {}?", p.subtopic.to_lowercase()),
                obj.clone(),
                vec![id.clone()],
                QuestionCategory::SingleHop,
                vec![target(p)],
            ),
            1 => {
                let ts = when(t, id);
                (
                    format!("When did {s} mention that they {pred} {obj}?"),
                    format_datetime(&ts).split(" on ").nth(1).unwrap_or_default().to_string(),
                    vec![id.clone()],
                    QuestionCategory::Temporal,
                    vec![target(p)],
                )
            }
            _ => {
                // a second fact from another sub-topic of the same narrative
                let other = fact_turns.iter().find(|(oid, op)| oid != id && op.topic == p.topic && op.subtopic != p.subtopic);
                let Some((oid, op)) = other else { continue };
                let [_, opred, oobj] = op.fact.clone().expect("fact");
                (
                    format!("Across {}, what has {s} {pred} and what has {s} {opred}?", p.topic.to_lowercase()),
                    format!("{obj}; {oobj}"),
                    vec![id.clone(), oid.clone()],
                    QuestionCategory::MultiHop,
                    vec![target(p), target(op)],
                )
            }
        };
        if board.questions.contains_key(&normalize_ws(&text)) {
            continue;
        }
        made += 1;
        let evidence_set: BTreeSet<String> = evidence.iter().cloned().collect();
        board.questions.insert(
            normalize_ws(&text),
            QuestionPlan {
                targets,
                answer: answer.clone(),
                evidence,
                patterns: vec![[Some(s.clone()), Some(pred.clone()), None]],
            },
        );
        t.questions.push(EvalQuestion {
            question_id: format!("q{made}"),
            text,
            category,
            gold_answer: answer,
            evidence_turn_ids: evidence_set,
        });
    }
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// A replay configuration plus the evaluations to record against it.
#[derive(Debug, Clone)]
pub struct FixtureRun {
    pub engine: EngineConfig,
    pub evals: Vec<EvalOptions>,
    /// Interactive queries as `(question, k, retriever)`.
    pub queries: Vec<(String, usize, RetrieverKind)>,
}

impl FixtureRun {
    pub fn replay_only(engine: EngineConfig) -> Self {
        Self { engine, evals: Vec::new(), queries: Vec::new() }
    }
}

/// Records every backend exchange of the given runs into one script table.
pub fn record_script(t: &Transcript, board: &Storyboard, runs: &[FixtureRun]) -> Result<ScriptTable, String> {
    let recorder = Arc::new(RecordingBackend::new(SimulatedBackend::new(board.clone(), t)));
    let backend: Arc<dyn Backend> = recorder.clone();
    for run in runs {
        let mut engine = Engine::new(run.engine.clone(), backend.clone());
        let art = run_replay(&mut engine, t, None).map_err(|e| e.to_string())?;
        let data = RunData {
            engine: run.engine.clone(),
            transcript: t.clone(),
            records: Ok(art.records),
            memory: Ok(art.memory.clone()),
        };
        for opts in &run.evals {
            let report = evaluate_data(&data, backend.clone(), opts).map_err(|e| e.to_string())?;
            if let Some((m, e)) = report.errors.iter().next() {
                return Err(format!("{m}: {e}"));
            }
        }
        let probe = Probe::new(art.memory.bank, art.memory.store, backend.clone(), run.engine.clock, run.engine.semantic_retrieval);
        for (q, k, kind) in &run.queries {
            query(&probe, t, q, *k, *kind).map_err(|e| e.to_string())?;
        }
    }
    Ok(recorder.table())
}

fn plan(owner: &str, topic: &str, excerpt: &str, fact: Option<[&str; 3]>) -> TurnPlan {
    TurnPlan {
        owner: owner.into(),
        topic: topic.into(),
        subtopic: topic.into(),
        excerpt: Some(excerpt.into()),
        fact: fact.map(|f| f.map(String::from)),
    }
}

/// Six narratives, two per query: the one that answers it and a distractor
/// sharing the query's surface words.
pub fn contrast() -> (Transcript, Storyboard) {
    const LGBTQ: &str = "LGBTQ Journey, Community Support, Personal Growth, and Mentorship";
    const PAINT: &str = "Caroline's Paintings Exploring Identity, Unity and Self-Acceptance";
    const WOLVES: &str = "Professional Basketball Journey and Team Development with Minnesota Wolves";
    const LEBRON: &str = "Meeting LeBron James and Live Game Experience";
    const MOVIES: &str = "Movie Preferences, Recommendations and Viewing Experiences";
    const SCRIPT: &str = "Joanna completes third screenplay while receiving encouragement from Nate";
    // (speaker, text, plan)
    let sessions: Vec<(&str, Vec<(&str, &str, Option<TurnPlan>)>)> = vec![
        ("1:56 pm on 8 May, 2023", vec![
            ("Caroline", "I went to an LGBTQ support group yesterday and it made me feel accepted as a trans woman.",
                Some(plan("Caroline", LGBTQ, "I went to an LGBTQ support group yesterday and it made me feel accepted as a trans woman.", Some(["Caroline", "attended", "an LGBTQ support group"])))),
            ("Melanie", "That sounds really powerful, I am proud of you.", None),
            ("Caroline", "I just finished a painting of two hands joined in rainbow colours, it is about unity.",
                Some(plan("Caroline", PAINT, "I just finished a painting of two hands joined in rainbow colours, it is about unity.", Some(["Caroline", "painted", "two joined hands in rainbow colours"])))),
            ("Caroline", "I am starting to mentor transgender teens at the centre, I want to give back what the community gave me.",
                Some(plan("Caroline", LGBTQ, "I am starting to mentor transgender teens at the centre, I want to give back what the community gave me.", Some(["Caroline", "mentors", "transgender teens"])))),
            ("Caroline", "My paintings will be shown at the community gallery next month.",
                Some(plan("Caroline", PAINT, "My paintings will be shown at the community gallery next month.", None))),
        ]),
        ("7:10 pm on 20 May, 2023", vec![
            ("John", "I signed with the Minnesota Wolves this season and the coach wants me to lead the second unit.",
                Some(plan("John", WOLVES, "I signed with the Minnesota Wolves this season and the coach wants me to lead the second unit.", Some(["John", "signed with", "the Minnesota Wolves"])))),
            ("John", "I went to a game last week and got to meet him courtside after the final buzzer.",
                Some(plan("John", LEBRON, "I went to a game last week and got to meet him courtside after the final buzzer.", None))),
            ("Tim", "No way, that must have been unreal.", None),
            ("John", "The player I look up to most is the one who makes everyone around him better, his leadership and work ethic are what I want to build on my own team.",
                Some(plan("John", WOLVES, "The player I look up to most is the one who makes everyone around him better, his leadership and work ethic are what I want to build on my own team.", None))),
            ("John", "Seeing LeBron James play live was a dream, the arena was electric.",
                Some(plan("John", LEBRON, "Seeing LeBron James play live was a dream, the arena was electric.", None))),
        ]),
        ("4:02 pm on 2 June, 2023", vec![
            ("Joanna", "I finally finished my third screenplay last night, it is a thriller set in a lighthouse.",
                Some(plan("Joanna", SCRIPT, "I finally finished my third screenplay last night, it is a thriller set in a lighthouse.", Some(["Joanna", "finished", "a third screenplay"])))),
            ("Nate", "I knew you would get it done, I am so happy for you, Joanna.",
                Some(plan("Joanna", SCRIPT, "I knew you would get it done, I am so happy for you, Joanna.", None))),
            ("Joanna", "We both watched Eternal Sunshine of the Spotless Mind on Friday and loved it.",
                Some(plan("Joanna", MOVIES, "We both watched Eternal Sunshine of the Spotless Mind on Friday and loved it.", Some(["Joanna", "watched", "Eternal Sunshine of the Spotless Mind"])))),
            ("Nate", "Little Women was the other one we saw together, you cried at the end.",
                Some(plan("Joanna", MOVIES, "Little Women was the other one we saw together, you cried at the end.", None))),
        ]),
    ];

    let mut board = Storyboard::default();
    let mut out = Vec::new();
    for (s, (when, turns)) in sessions.into_iter().enumerate() {
        let datetime = crate::transcript::parse_datetime(when).expect("fixture dates parse");
        let session_id = format!("s{}", s + 1);
        let turns = turns
            .into_iter()
            .enumerate()
            .map(|(j, (speaker, text, p))| {
                let turn_id = format!("s{}t{}", s + 1, j + 1);
                if let Some(p) = p {
                    board.turns.insert(turn_id.clone(), p);
                }
                Turn { turn_id, session_id: session_id.clone(), speaker: speaker.into(), timestamp: datetime, ordinal: j as u32 + 1, text: text.into() }
            })
            .collect();
        out.push(Session { session_id, datetime, turns });
    }
    let mut t = Transcript { scenario_id: "contrast".into(), sessions: out, questions: Vec::new() };
    let qs: [(&str, &str, &str, &str, &[&str]); 3] = [
        ("What is Caroline's identity?", "Caroline", LGBTQ, "A transgender woman", &["s1t1"]),
        ("What does John like about LeBron James?", "John", WOLVES, "His leadership and work ethic", &["s2t4"]),
        ("What movies have both Joanna and Nate seen?", "Joanna", MOVIES, "Eternal Sunshine of the Spotless Mind and Little Women", &["s3t3", "s3t4"]),
    ];
    for (i, (text, owner, target, answer, evidence)) in qs.iter().enumerate() {
        board.questions.insert(
            normalize_ws(text),
            QuestionPlan {
                targets: vec![Target { owner: owner.to_string(), names: vec![target.to_string()] }],
                answer: answer.to_string(),
                evidence: evidence.iter().map(|s| s.to_string()).collect(),
                patterns: vec![[Some(owner.to_string()), None, None]],
            },
        );
        t.questions.push(EvalQuestion {
            question_id: format!("q{}", i + 1),
            text: text.to_string(),
            category: if evidence.len() > 1 { QuestionCategory::MultiHop } else { QuestionCategory::SingleHop },
            gold_answer: answer.to_string(),
            evidence_turn_ids: evidence.iter().map(|s| s.to_string()).collect(),
        });
    }
    board.index(&t);
    (t, board)
}

/// Engine settings for the retriever-contrast fixture: a short full-context phase so
/// most turns go through binding.
pub fn contrast_config() -> EngineConfig {
    EngineConfig { t: 4, b: 0, consolidation_policy: ConsolidationPolicy::None, ..EngineConfig::default() }
}
