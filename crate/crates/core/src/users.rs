//! User registry, login state and the user hierarchy.
//!
//! The registry lives in memory behind a mutex and, when opened with a path,
//! is rewritten as one JSON file (temp file + rename) after every change.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UsersError {
    #[error("user name `{0}` is already registered")]
    DuplicateName(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("bad token for user `{0}`")]
    BadToken(String),
    #[error("user `{0}` is still logged in")]
    UserStillLoggedIn(String),
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("users store: {0}")]
    Storage(String),
}

/// Parent map over user ids with a single root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserTree {
    #[serde(default)]
    pub root: Option<String>,
    #[serde(default)]
    pub parent: BTreeMap<String, String>,
}

impl UserTree {
    pub fn with_root(root: impl Into<String>) -> Self {
        Self { root: Some(root.into()), parent: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn contains(&self, user: &str) -> bool {
        self.root.as_deref() == Some(user) || self.parent.contains_key(user)
    }

    /// Adds or moves `child` under `parent`, refusing anything that breaks the tree.
    pub fn set_parent(&mut self, child: &str, parent: &str) -> Result<(), UsersError> {
        if self.root.as_deref() == Some(child) {
            return Err(UsersError::InvalidHierarchy(format!("root `{child}` cannot have a parent")));
        }
        if !self.contains(parent) {
            return Err(UsersError::InvalidHierarchy(format!("parent `{parent}` is not in the hierarchy")));
        }
        if child == parent || self.is_ancestor(child, parent) {
            return Err(UsersError::InvalidHierarchy(format!("`{child}` → `{parent}` would form a cycle")));
        }
        self.parent.insert(child.to_string(), parent.to_string());
        Ok(())
    }

    /// Detaches `user`; its children are re-parented to its own parent.
    pub fn remove(&mut self, user: &str) {
        let up = self.parent.remove(user);
        for p in self.parent.values_mut() {
            if p == user {
                if let Some(up) = &up {
                    *p = up.clone();
                }
            }
        }
        if up.is_none() && self.root.as_deref() == Some(user) {
            self.root = None;
            self.parent.clear();
        }
    }

    /// Strict ancestry: `a` lies on `b`'s parent chain. Irreflexive.
    pub fn is_ancestor(&self, a: &str, b: &str) -> bool {
        let mut cur = self.parent.get(b);
        let mut steps = 0;
        while let Some(p) = cur {
            if p == a {
                return true;
            }
            steps += 1;
            if steps > self.parent.len() {
                return false;
            }
            cur = self.parent.get(p);
        }
        false
    }

    /// Depth below the root (root = 0); `None` for users outside the tree.
    pub fn rank(&self, user: &str) -> Option<usize> {
        if self.root.as_deref() == Some(user) {
            return Some(0);
        }
        let mut depth = 0;
        let mut cur = user;
        while let Some(p) = self.parent.get(cur) {
            depth += 1;
            if depth > self.parent.len() {
                return None;
            }
            if self.root.as_deref() == Some(p.as_str()) {
                return Some(depth);
            }
            cur = p;
        }
        None
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.root.is_none() {
            return if self.parent.is_empty() { Ok(()) } else { Err("parent links without a root".into()) };
        }
        for user in self.parent.keys() {
            if self.rank(user).is_none() {
                return Err(format!("`{user}` does not reach the root (cycle or dangling parent)"));
            }
        }
        Ok(())
    }
}

/// Read access to users as the collaboration models need it.
pub trait UserDirectory {
    fn hierarchy(&self) -> Option<UserTree>;
}

/// Directory with no users and no hierarchy.
pub struct NoDirectory;

impl UserDirectory for NoDirectory {
    fn hierarchy(&self) -> Option<UserTree> {
        None
    }
}

impl UserDirectory for UserTree {
    fn hierarchy(&self) -> Option<UserTree> {
        (!self.is_empty()).then(|| self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub name: String,
    pub secret_token: String,
    pub logged_in: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionAuth {
    pub user_id: String,
    pub name: String,
}

#[derive(Default, Serialize, Deserialize)]
struct Store {
    users: BTreeMap<String, UserRecord>,
    #[serde(default)]
    hierarchy: UserTree,
}

struct Inner {
    store: Store,
    rng: StdRng,
}

pub struct UsersService {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl UsersService {
    pub fn in_memory() -> Self {
        Self::from_parts(Store::default(), StdRng::from_entropy(), None)
    }

    /// Ids and tokens drawn from a seeded generator, for reproducible runs.
    pub fn with_seed(seed: u64) -> Self {
        Self::from_parts(Store::default(), StdRng::seed_from_u64(seed), None)
    }

    /// Loads the store at `path`, creating an empty one if the file does not exist.
    pub fn open(path: &Path) -> Result<Self, UsersError> {
        let store = match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| UsersError::Storage(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Store::default(),
            Err(e) => return Err(UsersError::Storage(e.to_string())),
        };
        let svc = Self::from_parts(store, StdRng::from_entropy(), Some(path.to_path_buf()));
        svc.persist(&svc.inner.lock().expect("users lock").store)?;
        Ok(svc)
    }

    fn from_parts(store: Store, rng: StdRng, path: Option<PathBuf>) -> Self {
        Self { inner: Mutex::new(Inner { store, rng }), path }
    }

    fn persist(&self, store: &Store) -> Result<(), UsersError> {
        let Some(path) = &self.path else { return Ok(()) };
        let text = serde_json::to_string_pretty(store).map_err(|e| UsersError::Storage(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| UsersError::Storage(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| UsersError::Storage(e.to_string()))
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut Inner) -> Result<T, UsersError>) -> Result<T, UsersError> {
        let mut inner = self.inner.lock().expect("users lock");
        let out = f(&mut inner)?;
        self.persist(&inner.store)?;
        Ok(out)
    }

    /// Returns `(user_id, secret_token)`.
    pub fn register(&self, name: &str) -> Result<(String, String), UsersError> {
        self.mutate(|inner| {
            if inner.store.users.values().any(|u| u.name == name) {
                return Err(UsersError::DuplicateName(name.to_string()));
            }
            let mut id_bytes = [0u8; 16];
            inner.rng.fill_bytes(&mut id_bytes);
            let user_id = uuid::Builder::from_random_bytes(id_bytes).into_uuid().to_string();
            let mut token = [0u8; 32];
            inner.rng.fill_bytes(&mut token);
            let secret_token = hex::encode(token);
            inner.store.users.insert(
                user_id.clone(),
                UserRecord { user_id: user_id.clone(), name: name.to_string(), secret_token: secret_token.clone(), logged_in: false },
            );
            Ok((user_id, secret_token))
        })
    }

    pub fn remove(&self, user_id: &str) -> Result<(), UsersError> {
        self.mutate(|inner| {
            let rec = inner.store.users.get(user_id).ok_or_else(|| UsersError::UnknownUser(user_id.to_string()))?;
            if rec.logged_in {
                return Err(UsersError::UserStillLoggedIn(user_id.to_string()));
            }
            inner.store.users.remove(user_id);
            inner.store.hierarchy.remove(user_id);
            Ok(())
        })
    }

    pub fn login(&self, user_id: &str, token: &str) -> Result<SessionAuth, UsersError> {
        self.mutate(|inner| {
            let rec = inner.store.users.get_mut(user_id).ok_or_else(|| UsersError::UnknownUser(user_id.to_string()))?;
            if !ct_eq(rec.secret_token.as_bytes(), token.as_bytes()) {
                return Err(UsersError::BadToken(user_id.to_string()));
            }
            rec.logged_in = true;
            Ok(SessionAuth { user_id: rec.user_id.clone(), name: rec.name.clone() })
        })
    }

    pub fn logout(&self, user_id: &str) -> Result<(), UsersError> {
        self.mutate(|inner| {
            let rec = inner.store.users.get_mut(user_id).ok_or_else(|| UsersError::UnknownUser(user_id.to_string()))?;
            rec.logged_in = false;
            Ok(())
        })
    }

    pub fn user(&self, user_id: &str) -> Option<UserRecord> {
        self.inner.lock().expect("users lock").store.users.get(user_id).cloned()
    }

    pub fn find_by_name(&self, name: &str) -> Option<UserRecord> {
        self.inner.lock().expect("users lock").store.users.values().find(|u| u.name == name).cloned()
    }

    pub fn user_count(&self) -> usize {
        self.inner.lock().expect("users lock").store.users.len()
    }

    pub fn set_hierarchy_root(&self, user_id: &str) -> Result<(), UsersError> {
        self.mutate(|inner| {
            if !inner.store.users.contains_key(user_id) {
                return Err(UsersError::UnknownUser(user_id.to_string()));
            }
            inner.store.hierarchy = UserTree::with_root(user_id);
            Ok(())
        })
    }

    pub fn set_parent(&self, child: &str, parent: &str) -> Result<(), UsersError> {
        self.mutate(|inner| {
            for u in [child, parent] {
                if !inner.store.users.contains_key(u) {
                    return Err(UsersError::UnknownUser(u.to_string()));
                }
            }
            inner.store.hierarchy.set_parent(child, parent)
        })
    }

    pub fn is_ancestor(&self, a: &str, b: &str) -> bool {
        self.inner.lock().expect("users lock").store.hierarchy.is_ancestor(a, b)
    }

    pub fn rank(&self, user: &str) -> Option<usize> {
        self.inner.lock().expect("users lock").store.hierarchy.rank(user)
    }
}

impl UserDirectory for UsersService {
    fn hierarchy(&self) -> Option<UserTree> {
        let inner = self.inner.lock().expect("users lock");
        (!inner.store.hierarchy.is_empty()).then(|| inner.store.hierarchy.clone())
    }
}

/// Deterministic UUID-shaped id for a name, used by tooling that needs stable ids.
pub fn stable_user_id(name: &str) -> String {
    Uuid::new_v5(&Uuid::NAMESPACE_OID, format!("sara-user/{name}").as_bytes()).to_string()
}
