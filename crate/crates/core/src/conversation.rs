//! Dialogues, turns and the short-term context window.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DialogueId, Timestamp, TurnId};
use crate::persistence::{Fold, Journal, Stream, StreamEvent};

/// Window size used for response generation when none is configured.
pub const DEFAULT_CONTEXT_TURNS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: DialogueId,
    pub title: String,
    pub created_at: Timestamp,
    pub turn_ids: Vec<TurnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub id: TurnId,
    pub dialogue_id: DialogueId,
    pub role: Role,
    pub text: String,
    pub created_at: Timestamp,
    pub revision: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub dialogue_id: DialogueId,
    pub turns: Vec<Turn>,
    pub max_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum TurnEvent {
    DialogueCreated {
        id: DialogueId,
        title: String,
        created_at: Timestamp,
    },
    TurnAppended(Turn),
    TurnEdited {
        id: TurnId,
        text: String,
        revision: u32,
    },
}

impl StreamEvent for TurnEvent {
    const STREAM: Stream = Stream::Turns;

    fn entity_id(&self) -> String {
        match self {
            TurnEvent::DialogueCreated { id, .. } => id.to_string(),
            TurnEvent::TurnAppended(t) => t.id.to_string(),
            TurnEvent::TurnEdited { id, .. } => id.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConversationState {
    pub dialogues: BTreeMap<DialogueId, Dialogue>,
    pub turns: HashMap<TurnId, Turn>,
}

impl Fold for ConversationState {
    type Event = TurnEvent;

    fn apply(&mut self, event: &TurnEvent) {
        match event {
            TurnEvent::DialogueCreated { id, title, created_at } => {
                self.dialogues.insert(
                    id.clone(),
                    Dialogue {
                        id: id.clone(),
                        title: title.clone(),
                        created_at: *created_at,
                        turn_ids: Vec::new(),
                    },
                );
            }
            TurnEvent::TurnAppended(turn) => {
                if let Some(d) = self.dialogues.get_mut(&turn.dialogue_id) {
                    d.turn_ids.push(turn.id.clone());
                }
                self.turns.insert(turn.id.clone(), turn.clone());
            }
            TurnEvent::TurnEdited { id, text, revision } => {
                if let Some(t) = self.turns.get_mut(id) {
                    t.text = text.clone();
                    t.revision = *revision;
                }
            }
        }
    }
}

impl ConversationState {
    pub fn dialogue(&self, id: &DialogueId) -> Result<&Dialogue> {
        self.dialogues
            .get(id)
            .ok_or_else(|| Error::UnknownDialogue(id.to_string()))
    }

    pub fn turn(&self, id: &TurnId) -> Result<&Turn> {
        self.turns.get(id).ok_or_else(|| Error::UnknownTurn(id.to_string()))
    }

    /// All turns of a dialogue in append order.
    pub fn turns_of(&self, id: &DialogueId) -> Result<Vec<&Turn>> {
        let d = self.dialogue(id)?;
        Ok(d.turn_ids.iter().filter_map(|t| self.turns.get(t)).collect())
    }

    pub fn user_turns_of(&self, id: &DialogueId) -> Result<Vec<&Turn>> {
        Ok(self
            .turns_of(id)?
            .into_iter()
            .filter(|t| t.role == Role::User)
            .collect())
    }

    pub fn context(&self, id: &DialogueId, max_turns: usize) -> Result<ContextWindow> {
        let all = self.turns_of(id)?;
        let skip = all.len().saturating_sub(max_turns);
        Ok(ContextWindow {
            dialogue_id: id.clone(),
            turns: all.into_iter().skip(skip).cloned().collect(),
            max_turns,
        })
    }
}

/// Validated mutations over [`ConversationState`], journaled to the turns stream.
#[derive(Debug)]
pub struct ConversationStore {
    state: ConversationState,
    journal: Journal<TurnEvent>,
}

impl ConversationStore {
    pub fn new(journal: Journal<TurnEvent>) -> Result<Self> {
        let state = journal.replay()?;
        Ok(Self { state, journal })
    }

    pub fn in_memory() -> Self {
        Self {
            state: ConversationState::default(),
            journal: Journal::in_memory(),
        }
    }

    pub fn state(&self) -> &ConversationState {
        &self.state
    }

    pub fn journal(&self) -> &Journal<TurnEvent> {
        &self.journal
    }

    pub(crate) fn commit(&mut self, event: TurnEvent, at: Timestamp) -> Result<()> {
        self.journal.append(&event, at)?;
        self.state.apply(&event);
        Ok(())
    }

    pub fn create_dialogue(&mut self, id: DialogueId, title: String, at: Timestamp) -> Result<DialogueId> {
        self.commit(
            TurnEvent::DialogueCreated {
                id: id.clone(),
                title,
                created_at: at,
            },
            at,
        )?;
        Ok(id)
    }

    pub fn append_turn(
        &mut self,
        id: TurnId,
        dialogue_id: &DialogueId,
        role: Role,
        text: &str,
        at: Timestamp,
    ) -> Result<TurnId> {
        self.state.dialogue(dialogue_id)?;
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let turn = Turn {
            id: id.clone(),
            dialogue_id: dialogue_id.clone(),
            role,
            text: text.to_owned(),
            created_at: at,
            revision: 0,
        };
        self.commit(TurnEvent::TurnAppended(turn), at)?;
        Ok(id)
    }

    pub fn get_context(&self, dialogue_id: &DialogueId, max_turns: usize) -> Result<ContextWindow> {
        self.state.context(dialogue_id, max_turns)
    }

    /// Checks an edit without applying it; returns the event it would commit.
    pub fn prepare_edit(&self, turn_id: &TurnId, new_text: &str) -> Result<TurnEvent> {
        let turn = self.state.turn(turn_id)?;
        if new_text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(TurnEvent::TurnEdited {
            id: turn.id.clone(),
            text: new_text.to_owned(),
            revision: turn.revision + 1,
        })
    }

    pub fn update_turn_text(&mut self, turn_id: &TurnId, new_text: &str, at: Timestamp) -> Result<Turn> {
        let ev = self.prepare_edit(turn_id, new_text)?;
        self.commit(ev, at)?;
        Ok(self.state.turn(turn_id)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{Clock, IdSource, SeededIds, SteppingClock};

    struct Fixture {
        store: ConversationStore,
        ids: SeededIds,
        clock: SteppingClock,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                store: ConversationStore::in_memory(),
                ids: SeededIds::new(1),
                clock: SteppingClock::fixed(),
            }
        }

        fn dialogue(&mut self) -> DialogueId {
            let id = DialogueId::new(self.ids.next_hex());
            self.store.create_dialogue(id, "test".into(), self.clock.now()).unwrap()
        }

        fn append(&mut self, d: &DialogueId, role: Role, text: &str) -> Result<TurnId> {
            let id = TurnId::new(self.ids.next_hex());
            self.store.append_turn(id, d, role, text, self.clock.now())
        }
    }

    #[test]
    fn first_append_gets_revision_zero() {
        let mut f = Fixture::new();
        let d = f.dialogue();
        let t1 = f.append(&d, Role::User, "Help me plan my week").unwrap();
        let dlg = f.store.state().dialogue(&d).unwrap();
        assert_eq!(dlg.turn_ids, vec![t1.clone()]);
        assert_eq!(f.store.state().turn(&t1).unwrap().revision, 0);
    }

    #[test]
    fn context_preserves_append_order() {
        let mut f = Fixture::new();
        let d = f.dialogue();
        let a = f.append(&d, Role::User, "one").unwrap();
        let b = f.append(&d, Role::Assistant, "two").unwrap();
        let ctx = f.store.get_context(&d, DEFAULT_CONTEXT_TURNS).unwrap();
        let ids: Vec<_> = ctx.turns.iter().map(|t| t.id.clone()).collect();
        assert_eq!(ids, vec![a, b]);
    }

    #[test]
    fn unknown_dialogue_and_empty_text() {
        let mut f = Fixture::new();
        let d = f.dialogue();
        assert!(matches!(
            f.append(&DialogueId::from("d9"), Role::User, "x"),
            Err(Error::UnknownDialogue(_))
        ));
        assert!(matches!(f.append(&d, Role::User, "  "), Err(Error::EmptyText)));
        assert!(matches!(f.store.get_context(&"d9".into(), 3), Err(Error::UnknownDialogue(_))));
    }

    #[test]
    fn window_truncates_to_most_recent() {
        let mut f = Fixture::new();
        let d = f.dialogue();
        let _ = f.append(&d, Role::User, "a").unwrap();
        let b = f.append(&d, Role::Assistant, "b").unwrap();
        let c = f.append(&d, Role::User, "c").unwrap();
        let ctx = f.store.get_context(&d, 2).unwrap();
        assert_eq!(ctx.turns.iter().map(|t| &t.id).collect::<Vec<_>>(), vec![&b, &c]);
        let empty_d = f.dialogue();
        assert!(f.store.get_context(&empty_d, 2).unwrap().turns.is_empty());
    }

    #[test]
    fn edits_bump_revision_and_show_in_context() {
        let mut f = Fixture::new();
        let d = f.dialogue();
        let t1 = f.append(&d, Role::User, "I live on Elm St").unwrap();
        let now = f.clock.now();
        let turn = f.store.update_turn_text(&t1, "anon text", now).unwrap();
        assert_eq!((turn.id.clone(), turn.revision, turn.text.as_str()), (t1.clone(), 1, "anon text"));
        let turn = f.store.update_turn_text(&t1, "X", now).unwrap();
        assert_eq!(turn.revision, 2);
        let ctx = f.store.get_context(&d, 10).unwrap();
        assert_eq!(ctx.turns[0].text, "X");
        assert!(matches!(
            f.store.update_turn_text(&"t99".into(), "x", now),
            Err(Error::UnknownTurn(_))
        ));
        assert!(matches!(f.store.update_turn_text(&t1, "", now), Err(Error::EmptyText)));
    }

    #[test]
    fn replay_reconstructs_state() {
        let mut f = Fixture::new();
        let d = f.dialogue();
        let t = f.append(&d, Role::User, "hello").unwrap();
        f.append(&d, Role::Assistant, "hi").unwrap();
        let now = f.clock.now();
        f.store.update_turn_text(&t, "hello again", now).unwrap();
        let rebuilt: ConversationState = f.store.journal().replay().unwrap();
        assert_eq!(&rebuilt, f.store.state());
    }
}
