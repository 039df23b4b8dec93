use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use taskprompt::decoder::ActionLexicon;
use taskprompt::eval::{GoldStandard, JsonlStore, RatingRecord, ResponseRecord};
use taskprompt::gateway::Gateway;
use taskprompt::prompt::ExampleLibrary;
use taskprompt::scene::Scene;
use taskprompt::session::{replay_session, Decision, LearnedTask, Session, SessionConfig, SessionContext, SessionEvent};
use taskprompt::steps::AgentGrammar;

use crate::{ApiError, StoredScene};

pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub library: ExampleLibrary,
    pub grammar: AgentGrammar,
    pub lexicon: ActionLexicon,
    /// Used by automatic report aggregation only.
    pub gold: GoldStandard,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoggedEvent {
    session: String,
    #[serde(flatten)]
    event: SessionEvent,
}

struct Inner {
    config: ServiceConfig,
    gateway: Gateway,
    scenes: RwLock<HashMap<String, Scene>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    scene_log: JsonlStore<StoredScene>,
    event_log: JsonlStore<LoggedEvent>,
    records: JsonlStore<ResponseRecord>,
    ratings: JsonlStore<RatingRecord>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn store_err(e: impl std::fmt::Display) -> ApiError {
    ApiError::internal(e)
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    /// Loads the logs in `config.data_dir` and replays stored sessions.
    /// Sessions whose replay fails are reported and left out.
    pub fn open(config: ServiceConfig, gateway: Gateway) -> Result<Self, String> {
        let dir = config.data_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let inner = Inner {
            scene_log: JsonlStore::new(dir.join("scenes.jsonl")),
            event_log: JsonlStore::new(dir.join("session-events.jsonl")),
            records: JsonlStore::new(dir.join("responses.jsonl")),
            ratings: JsonlStore::new(dir.join("ratings.jsonl")),
            config,
            gateway,
            scenes: RwLock::default(),
            sessions: RwLock::default(),
        };
        let scenes: HashMap<_, _> = inner
            .scene_log
            .load()
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|s| (s.id, s.scene))
            .collect();
        *inner.scenes.write().unwrap() = scenes;

        let mut logs: Vec<(String, Vec<SessionEvent>)> = Vec::new();
        for logged in inner.event_log.load().map_err(|e| e.to_string())? {
            match logs.iter_mut().find(|(id, _)| *id == logged.session) {
                Some((_, events)) => events.push(logged.event),
                None => logs.push((logged.session, vec![logged.event])),
            }
        }
        let state = Self { inner: Arc::new(inner) };
        for (id, events) in logs {
            match replay_session(&events, state.ctx()) {
                Ok(session) => {
                    state.inner.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(session)));
                }
                Err(e) => eprintln!("session {id} not restored: {e}"),
            }
        }
        Ok(state)
    }

    fn ctx(&self) -> SessionContext<'_> {
        SessionContext {
            library: &self.inner.config.library,
            grammar: &self.inner.config.grammar,
            lexicon: &self.inner.config.lexicon,
            gateway: &self.inner.gateway,
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.inner.gateway
    }

    pub fn gold(&self) -> &GoldStandard {
        &self.inner.config.gold
    }

    /// Runs `f` on the blocking pool; model calls block.
    pub(crate) async fn blocking<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
    {
        let state = self.clone();
        tokio::task::spawn_blocking(move || f(&state))
            .await
            .map_err(|e| ApiError::internal(e))?
    }

    pub fn add_scene(&self, scene: Scene) -> Result<StoredScene, ApiError> {
        let stored = StoredScene {
            id: uuid::Uuid::new_v4().simple().to_string(),
            scene,
        };
        self.inner.scene_log.append(&stored).map_err(store_err)?;
        self.inner
            .scenes
            .write()
            .unwrap()
            .insert(stored.id.clone(), stored.scene.clone());
        Ok(stored)
    }

    pub fn scene(&self, id: &str) -> Result<Scene, ApiError> {
        self.inner
            .scenes
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_scene", format!("no scene `{id}`")))
    }

    fn session_handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session `{id}`")))
    }

    pub fn session(&self, id: &str) -> Result<Session, ApiError> {
        let handle = self.session_handle(id)?;
        let session = lock(&handle).clone();
        Ok(session)
    }

    fn log(&self, session_id: &str, event: SessionEvent) -> Result<(), ApiError> {
        let logged = LoggedEvent {
            session: session_id.to_string(),
            event,
        };
        self.inner.event_log.append(&logged).map_err(store_err)
    }

    pub fn open_session(&self, scene: Scene, target_index: usize, config: SessionConfig) -> Result<Session, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::open(id.clone(), scene, target_index, config, self.ctx())?;
        self.log(&id, session.opened_event())?;
        self.inner
            .sessions
            .write()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn apply_decision(&self, id: &str, decision: Decision) -> Result<Session, ApiError> {
        let handle = self.session_handle(id)?;
        let mut session = lock(&handle);
        session.apply_decision(&decision, self.ctx())?;
        self.log(id, SessionEvent::Decided { decision })?;
        Ok(session.clone())
    }

    pub fn finish_session(&self, id: &str, elicit_goal: bool) -> Result<(Session, LearnedTask), ApiError> {
        let handle = self.session_handle(id)?;
        let mut session = lock(&handle);
        let learned = session.finish(elicit_goal, self.ctx())?;
        self.log(id, SessionEvent::Finished { elicit_goal })?;
        Ok((session.clone(), learned))
    }

    pub fn records(&self) -> Result<Vec<ResponseRecord>, ApiError> {
        self.inner.records.load().map_err(store_err)
    }

    pub fn add_records(&self, records: &[ResponseRecord]) -> Result<(), ApiError> {
        self.inner.records.append_all(records).map_err(store_err)
    }

    pub fn ratings(&self) -> Result<Vec<RatingRecord>, ApiError> {
        self.inner.ratings.load().map_err(store_err)
    }

    pub fn add_rating(&self, rating: &RatingRecord) -> Result<(), ApiError> {
        if rating.rater.trim().is_empty() {
            return Err(ApiError::bad_request("missing_rater", "rater id is empty"));
        }
        if !self.records()?.iter().any(|r| r.id == rating.response_id) {
            return Err(ApiError::not_found(
                "unknown_response",
                format!("no response `{}`", rating.response_id),
            ));
        }
        self.inner.ratings.append(rating).map_err(store_err)
    }
}
