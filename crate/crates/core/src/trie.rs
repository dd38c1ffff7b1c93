//! Character trie over enumerable values (function names, quoted enum
//! members) and the flat prefix-set alternative.
//!
//! Children are kept in ordered maps so every traversal is lexicographic.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrieError {
    #[error("cannot insert an empty word")]
    EmptyWord,
}

/// Index of a node inside a [`Trie`]. The root is always `NodeId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<char, NodeId>,
    end_of_word: bool,
}

#[derive(Debug, Clone)]
pub struct Trie {
    nodes: Vec<Node>,
    words: usize,
    depth: usize,
}

impl Default for Trie {
    fn default() -> Self {
        Trie::new()
    }
}

impl Trie {
    pub fn new() -> Self {
        Trie {
            nodes: vec![Node::default()],
            words: 0,
            depth: 0,
        }
    }

    pub fn from_words<I, S>(words: I) -> Result<Self, TrieError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut trie = Trie::new();
        for w in words {
            trie.insert(w.as_ref())?;
        }
        Ok(trie)
    }

    pub fn insert(&mut self, word: &str) -> Result<(), TrieError> {
        if word.is_empty() {
            return Err(TrieError::EmptyWord);
        }
        let mut node = Self::root();
        for ch in word.chars() {
            node = match self.nodes[node.0 as usize].children.get(&ch) {
                Some(&next) => next,
                None => {
                    let next = NodeId(self.nodes.len() as u32);
                    self.nodes.push(Node::default());
                    self.nodes[node.0 as usize].children.insert(ch, next);
                    next
                }
            };
        }
        let n = &mut self.nodes[node.0 as usize];
        if !n.end_of_word {
            n.end_of_word = true;
            self.words += 1;
            self.depth = self.depth.max(word.chars().count());
        }
        Ok(())
    }

    pub fn root() -> NodeId {
        NodeId(0)
    }

    /// Number of distinct words.
    pub fn len(&self) -> usize {
        self.words
    }

    pub fn is_empty(&self) -> bool {
        self.words == 0
    }

    /// Length in characters of the longest inserted word.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn child(&self, node: NodeId, ch: char) -> Option<NodeId> {
        self.nodes[node.0 as usize].children.get(&ch).copied()
    }

    pub fn is_word_end(&self, node: NodeId) -> bool {
        self.nodes[node.0 as usize].end_of_word
    }

    pub fn has_children(&self, node: NodeId) -> bool {
        !self.nodes[node.0 as usize].children.is_empty()
    }

    /// Outgoing edge labels of `node`, in order.
    pub fn edges(&self, node: NodeId) -> impl Iterator<Item = char> + '_ {
        self.nodes[node.0 as usize].children.keys().copied()
    }

    /// Walks `path` from `node`; `None` once an edge is missing.
    pub fn walk(&self, node: NodeId, path: &str) -> Option<NodeId> {
        path.chars().try_fold(node, |n, ch| self.child(n, ch))
    }

    pub fn is_prefix(&self, prefix: &str) -> bool {
        self.is_prefix_counted(prefix).0
    }

    /// Like [`Trie::is_prefix`], also returning how many nodes were inspected.
    pub fn is_prefix_counted(&self, prefix: &str) -> (bool, usize) {
        if self.is_empty() {
            return (false, 1);
        }
        let mut node = Self::root();
        let mut visits = 1;
        for ch in prefix.chars() {
            match self.child(node, ch) {
                Some(next) => {
                    node = next;
                    visits += 1;
                }
                None => return (false, visits),
            }
        }
        (true, visits)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.walk(Self::root(), word)
            .is_some_and(|n| self.is_word_end(n))
    }

    /// Inserted words starting with `prefix`, lexicographically. With
    /// `include_prefix == false` the prefix is stripped from each result.
    pub fn search(&self, prefix: &str, include_prefix: bool) -> Vec<String> {
        let Some(node) = self.walk(Self::root(), prefix) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut current = if include_prefix {
            prefix.to_string()
        } else {
            String::new()
        };
        self.collect_words(node, &mut current, &mut out);
        out
    }

    fn collect_words(&self, node: NodeId, current: &mut String, out: &mut Vec<String>) {
        let n = &self.nodes[node.0 as usize];
        if n.end_of_word {
            out.push(current.clone());
        }
        for (&ch, &next) in &n.children {
            current.push(ch);
            self.collect_words(next, current, out);
            current.pop();
        }
    }

    /// Every distinct non-empty prefix of every word, in depth-first order.
    pub fn get_all_prefixes(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.nodes.len().saturating_sub(1));
        let mut current = String::new();
        self.collect_prefixes(Self::root(), &mut current, &mut out);
        out
    }

    fn collect_prefixes(&self, node: NodeId, current: &mut String, out: &mut Vec<String>) {
        if node != Self::root() {
            out.push(current.clone());
        }
        for (&ch, &next) in &self.nodes[node.0 as usize].children {
            current.push(ch);
            self.collect_prefixes(next, current, out);
            current.pop();
        }
    }
}

/// All prefixes of a word set in a hash set: constant-time viability checks.
#[derive(Debug, Clone, Default)]
pub struct PrefixSet {
    prefixes: HashSet<String>,
    words: HashSet<String>,
}

impl PrefixSet {
    pub fn build<I, S>(words: I) -> Result<Self, TrieError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = PrefixSet::default();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() {
                return Err(TrieError::EmptyWord);
            }
            for (i, ch) in w.char_indices() {
                set.prefixes.insert(w[..i + ch.len_utf8()].to_string());
            }
            set.words.insert(w.to_string());
        }
        Ok(set)
    }

    /// True iff `p` is a prefix of some word. The empty string counts when
    /// the set is non-empty, as in [`Trie::is_prefix`].
    pub fn contains_prefix(&self, p: &str) -> bool {
        (p.is_empty() && !self.words.is_empty()) || self.prefixes.contains(p)
    }

    pub fn contains_word(&self, w: &str) -> bool {
        self.words.contains(w)
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }
}
