//! Composite application model: component descriptors, composites,
//! containers, and the application-description document.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sefa::ServiceEffectAutomaton;

/// Name given to the implicit top-level composite.
pub const ROOT_COMPOSITE: &str = "application";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxAttribute {
    StartsNew,
    Joins,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    StatefulSession,
    StatelessSession,
    Entity,
    MessageDriven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Access {
    Local,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationSignature {
    pub name: String,
    #[serde(default)]
    pub params: Vec<String>,
    #[serde(default = "void")]
    pub returns: String,
}

fn void() -> String {
    "void".to_string()
}

/// Structural interface signature. Equality is order-sensitive over the
/// operation list and each operation's type names.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InterfaceSignature {
    pub name: String,
    pub operations: Vec<OperationSignature>,
}

impl InterfaceSignature {
    pub fn operation(&self, name: &str) -> Option<&OperationSignature> {
        self.operations.iter().find(|o| o.name == name)
    }
}

/// A provided interface as declared on a component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidedInterface {
    pub name: String,
    pub operations: Vec<OperationSignature>,
    #[serde(default = "local")]
    pub access: Access,
}

fn local() -> Access {
    Access::Local
}

impl ProvidedInterface {
    pub fn signature(&self) -> InterfaceSignature {
        InterfaceSignature {
            name: self.name.clone(),
            operations: self.operations.clone(),
        }
    }

    pub fn has_operation(&self, op: &str) -> bool {
        self.operations.iter().any(|o| o.name == op)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationSpec {
    pub name: String,
    pub tx_attribute: TxAttribute,
    pub duration: u64,
    #[serde(default)]
    pub effect_automaton: Option<Arc<ServiceEffectAutomaton>>,
}

/// A versioned deployable component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDescriptor {
    pub name: String,
    pub version: u64,
    pub kind: ComponentKind,
    pub provided: Vec<ProvidedInterface>,
    #[serde(default)]
    pub required: Vec<String>,
    pub operations: Vec<OperationSpec>,
    #[serde(default)]
    pub state_fields: Vec<String>,
    #[serde(default)]
    pub entity_schema: Vec<String>,
    /// Backing data store (Entity only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_store: Option<String>,
    /// Source queue (MessageDriven only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
}

impl ComponentDescriptor {
    pub fn operation(&self, name: &str) -> Option<&OperationSpec> {
        self.operations.iter().find(|o| o.name == name)
    }

    pub fn provided_interface(&self, name: &str) -> Option<&ProvidedInterface> {
        self.provided.iter().find(|p| p.name == name)
    }

    /// Checks the per-descriptor invariants.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let err = |what: String| Err(ValidationError::Descriptor {
            component: self.name.clone(),
            reason: what,
        });
        if self.name.is_empty() {
            return err("empty component name".into());
        }
        let mut iface_names = BTreeSet::new();
        for p in &self.provided {
            if !iface_names.insert(p.name.as_str()) {
                return err(format!("provided interface `{}` declared twice", p.name));
            }
            let mut ops = BTreeSet::new();
            for o in &p.operations {
                if !ops.insert(o.name.as_str()) {
                    return err(format!(
                        "operation `{}` declared twice in interface `{}`",
                        o.name, p.name
                    ));
                }
                if self.operation(&o.name).is_none() {
                    return err(format!("operation `{}` has no operation spec", o.name));
                }
            }
        }
        let required: BTreeSet<&str> = self.required.iter().map(String::as_str).collect();
        if required.len() != self.required.len() {
            return err("required interface listed twice".into());
        }
        let mut op_names = BTreeSet::new();
        for op in &self.operations {
            if !op_names.insert(op.name.as_str()) {
                return err(format!("operation spec `{}` declared twice", op.name));
            }
            if !self.provided.iter().any(|p| p.has_operation(&op.name)) {
                return err(format!(
                    "operation spec `{}` matches no provided operation",
                    op.name
                ));
            }
            if op.duration < 1 {
                return err(format!("operation `{}` has zero duration", op.name));
            }
            if let Some(a) = &op.effect_automaton {
                for label in a.labels() {
                    if !required.contains(label.interface.as_str()) {
                        return err(format!(
                            "operation `{}` calls `{}` outside the required interfaces",
                            op.name, label
                        ));
                    }
                }
            }
        }
        match self.kind {
            ComponentKind::StatefulSession => {}
            _ if !self.state_fields.is_empty() => {
                return err("conversational state declared on a non-stateful component".into())
            }
            _ => {}
        }
        match self.kind {
            ComponentKind::Entity => {
                if self.entity_schema.is_empty() {
                    return err("entity component without entity_schema".into());
                }
                if self.data_store.is_none() {
                    return err("entity component without data_store".into());
                }
            }
            _ if !self.entity_schema.is_empty() || self.data_store.is_some() => {
                return err("entity_schema/data_store on a non-entity component".into())
            }
            _ => {}
        }
        match self.kind {
            ComponentKind::MessageDriven => {
                if self.provided.len() != 1 {
                    return err(
                        "message-driven component must provide exactly one receiver interface"
                            .into(),
                    );
                }
                if self.queue.is_none() {
                    return err("message-driven component without queue".into());
                }
            }
            _ if self.queue.is_some() => {
                return err("queue binding on a non-message-driven component".into())
            }
            _ => {}
        }
        Ok(())
    }
}

/// Reconfiguration effort class. Ordered so that `max` picks the dominant kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChangeKind {
    Functional,
    NonFunctional,
    Structural,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffError {
    #[error("component names differ: `{old}` vs `{new}`")]
    NameMismatch { old: String, new: String },
    #[error("version of `{name}` not increased ({old} -> {new})")]
    VersionError { name: String, old: u64, new: u64 },
}

/// Classifies the change between two versions of one component.
///
/// A change to anything a client or the persistent/conversational state
/// depends on (provided signatures and their access, required interfaces,
/// kind, state shape, schema, bindings) is structural. A change confined to
/// operation behaviour (automata, durations, transaction attributes) is
/// functional. A version bump with neither can only carry container-level
/// quality-of-service parameters and is non-functional.
pub fn diff_versions(
    old: &ComponentDescriptor,
    new: &ComponentDescriptor,
) -> Result<ChangeKind, DiffError> {
    if old.name != new.name {
        return Err(DiffError::NameMismatch {
            old: old.name.clone(),
            new: new.name.clone(),
        });
    }
    if new.version <= old.version {
        return Err(DiffError::VersionError {
            name: old.name.clone(),
            old: old.version,
            new: new.version,
        });
    }
    let structural = old.kind != new.kind
        || old.provided != new.provided
        || old.required != new.required
        || old.state_fields != new.state_fields
        || old.entity_schema != new.entity_schema
        || old.data_store != new.data_store
        || old.queue != new.queue;
    if structural {
        Ok(ChangeKind::Structural)
    } else if old.operations != new.operations {
        Ok(ChangeKind::Functional)
    } else {
        Ok(ChangeKind::NonFunctional)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wire {
    pub requirer: String,
    pub interface: String,
    /// `None` declares the requirement external to the application.
    #[serde(default)]
    pub provider: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompositeChild {
    Leaf(ComponentDescriptor),
    Composite(CompositeComponent),
}

impl CompositeChild {
    pub fn name(&self) -> &str {
        match self {
            CompositeChild::Leaf(d) => &d.name,
            CompositeChild::Composite(c) => &c.name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositeComponent {
    pub name: String,
    pub children: Vec<CompositeChild>,
    /// Wires whose endpoints both live below this composite and whose lowest
    /// common ancestor is this composite.
    pub internal_wiring: Vec<Wire>,
}

/// One preorder entry of a flattened composite.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FlatEntry {
    Composite { path: Vec<String> },
    Leaf { path: Vec<String>, descriptor: Box<ComponentDescriptor> },
}

impl CompositeComponent {
    /// Leaves in preorder.
    pub fn leaves(&self) -> Vec<&ComponentDescriptor> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a ComponentDescriptor>) {
        for c in &self.children {
            match c {
                CompositeChild::Leaf(d) => out.push(d),
                CompositeChild::Composite(sub) => sub.collect_leaves(out),
            }
        }
    }

    fn leaf_mut(&mut self, name: &str) -> Option<&mut ComponentDescriptor> {
        for c in &mut self.children {
            match c {
                CompositeChild::Leaf(d) if d.name == name => return Some(d),
                CompositeChild::Leaf(_) => {}
                CompositeChild::Composite(sub) => {
                    if let Some(d) = sub.leaf_mut(name) {
                        return Some(d);
                    }
                }
            }
        }
        None
    }

    fn remove_leaf(&mut self, name: &str) -> bool {
        let before = self.children.len();
        self.children
            .retain(|c| !matches!(c, CompositeChild::Leaf(d) if d.name == name));
        if self.children.len() != before {
            return true;
        }
        self.children.iter_mut().any(|c| match c {
            CompositeChild::Composite(sub) => sub.remove_leaf(name),
            CompositeChild::Leaf(_) => false,
        })
    }

    /// Path of composite names from this composite down to the leaf's parent.
    pub fn path_to(&self, leaf: &str) -> Option<Vec<String>> {
        for c in &self.children {
            match c {
                CompositeChild::Leaf(d) if d.name == leaf => return Some(vec![self.name.clone()]),
                CompositeChild::Leaf(_) => {}
                CompositeChild::Composite(sub) => {
                    if let Some(mut p) = sub.path_to(leaf) {
                        p.insert(0, self.name.clone());
                        return Some(p);
                    }
                }
            }
        }
        None
    }

    pub fn flatten(&self) -> Vec<FlatEntry> {
        fn walk(c: &CompositeComponent, path: &mut Vec<String>, out: &mut Vec<FlatEntry>) {
            path.push(c.name.clone());
            out.push(FlatEntry::Composite { path: path.clone() });
            for child in &c.children {
                match child {
                    CompositeChild::Leaf(d) => out.push(FlatEntry::Leaf {
                        path: path.clone(),
                        descriptor: Box::new(d.clone()),
                    }),
                    CompositeChild::Composite(sub) => walk(sub, path, out),
                }
            }
            path.pop();
        }
        let mut out = Vec::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }

    /// Rebuilds a composite from its preorder flattening. Internal wiring is
    /// re-derived from `wiring`.
    pub fn renest(entries: &[FlatEntry], wiring: &[Wire]) -> Option<CompositeComponent> {
        fn node_at<'a>(
            root: &'a mut CompositeComponent,
            path: &[String],
        ) -> Option<&'a mut CompositeComponent> {
            if path.first()? != &root.name {
                return None;
            }
            let mut cur = root;
            for name in &path[1..] {
                cur = cur.children.iter_mut().find_map(|c| match c {
                    CompositeChild::Composite(sub) if &sub.name == name => Some(sub),
                    _ => None,
                })?;
            }
            Some(cur)
        }
        let mut root: Option<CompositeComponent> = None;
        for e in entries {
            match e {
                FlatEntry::Composite { path } if path.len() == 1 => {
                    root = Some(CompositeComponent {
                        name: path[0].clone(),
                        children: Vec::new(),
                        internal_wiring: Vec::new(),
                    });
                }
                FlatEntry::Composite { path } => {
                    let parent = node_at(root.as_mut()?, &path[..path.len() - 1])?;
                    parent.children.push(CompositeChild::Composite(CompositeComponent {
                        name: path.last()?.clone(),
                        children: Vec::new(),
                        internal_wiring: Vec::new(),
                    }));
                }
                FlatEntry::Leaf { path, descriptor } => {
                    node_at(root.as_mut()?, path)?
                        .children
                        .push(CompositeChild::Leaf((**descriptor).clone()));
                }
            }
        }
        let mut root = root?;
        assign_internal_wiring(&mut root, wiring);
        Some(root)
    }
}

fn assign_internal_wiring(root: &mut CompositeComponent, wiring: &[Wire]) {
    fn clear(c: &mut CompositeComponent) {
        c.internal_wiring.clear();
        for child in &mut c.children {
            if let CompositeChild::Composite(sub) = child {
                clear(sub);
            }
        }
    }
    fn place(c: &mut CompositeComponent, lca: &[String], wire: &Wire) {
        if lca.len() == 1 {
            c.internal_wiring.push(wire.clone());
            return;
        }
        for child in &mut c.children {
            if let CompositeChild::Composite(sub) = child {
                if sub.name == lca[1] {
                    place(sub, &lca[1..], wire);
                    return;
                }
            }
        }
    }
    clear(root);
    for w in wiring {
        let Some(req) = root.path_to(&w.requirer) else { continue };
        let lca = match w.provider.as_ref().and_then(|p| root.path_to(p)) {
            Some(prov) => req
                .iter()
                .zip(&prov)
                .take_while(|(a, b)| a == b)
                .map(|(a, _)| a.clone())
                .collect::<Vec<_>>(),
            None => vec![root.name.clone()],
        };
        place(root, &lca, w);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InterceptorKind {
    CleanShutdown,
    RedeployBarrier,
    HomeTracking,
    TxDemarcation,
    Pooling,
    Authentication,
    Authorization,
    Persistence,
    RemoteCommunication,
    Logging,
}

impl InterceptorKind {
    /// Chain used for containers created without an explicit spec.
    pub fn default_chain() -> Vec<InterceptorKind> {
        vec![
            InterceptorKind::CleanShutdown,
            InterceptorKind::RedeployBarrier,
            InterceptorKind::HomeTracking,
            InterceptorKind::TxDemarcation,
            InterceptorKind::Pooling,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub hosted_component: String,
    pub interceptor_chain: Vec<InterceptorKind>,
    pub pool_size: u32,
}

impl ContainerSpec {
    pub fn with_defaults(component: &str) -> Self {
        Self {
            hosted_component: component.to_string(),
            interceptor_chain: InterceptorKind::default_chain(),
            pool_size: 4,
        }
    }

    pub fn has(&self, kind: InterceptorKind) -> bool {
        self.interceptor_chain.contains(&kind)
    }

    fn validate(&self) -> Result<(), ValidationError> {
        let err = |reason: &str| {
            Err(ValidationError::Container {
                component: self.hosted_component.clone(),
                reason: reason.to_string(),
            })
        };
        if self.pool_size == 0 {
            return err("pool_size must be positive");
        }
        let pos = |k| self.interceptor_chain.iter().position(|x| *x == k);
        let mut seen = BTreeSet::new();
        if !self.interceptor_chain.iter().all(|k| seen.insert(*k)) {
            return err("interceptor listed twice");
        }
        let (Some(tx), Some(pool)) = (pos(InterceptorKind::TxDemarcation), pos(InterceptorKind::Pooling))
        else {
            return err("chain must contain TxDemarcation and Pooling");
        };
        if tx > pool {
            return err("TxDemarcation must precede Pooling");
        }
        for k in [InterceptorKind::CleanShutdown, InterceptorKind::RedeployBarrier] {
            if pos(k).is_some_and(|p| p > tx) {
                return err("CleanShutdown and RedeployBarrier must precede TxDemarcation");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataStoreSpec {
    pub name: String,
    pub schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("component `{component}`: {reason}")]
    Descriptor { component: String, reason: String },
    #[error("container for `{component}`: {reason}")]
    Container { component: String, reason: String },
    #[error("composition: {0}")]
    Composition(String),
    #[error("inconsistent configuration: {0}")]
    Inconsistent(Finding),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),
}

/// Static part of a running application.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApplicationConfiguration {
    pub root: CompositeComponent,
    pub wiring: Vec<Wire>,
    pub containers: Vec<ContainerSpec>,
    pub data_stores: Vec<DataStoreSpec>,
    pub queues: Vec<String>,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeDoc {
    pub name: String,
    pub children: Vec<String>,
}

/// The application-description document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationDocument {
    pub components: Vec<ComponentDescriptor>,
    #[serde(default)]
    pub composites: Vec<CompositeDoc>,
    #[serde(default)]
    pub wiring: Vec<Wire>,
    pub containers: Vec<ContainerSpec>,
    #[serde(default)]
    pub data_stores: Vec<DataStoreSpec>,
    #[serde(default)]
    pub queues: Vec<String>,
    pub version: u64,
}

/// Parses and validates an application-description document.
pub fn load_application(text: &str) -> Result<ApplicationConfiguration, ModelError> {
    let doc: ApplicationDocument = serde_json::from_str(text)?;
    Ok(ApplicationConfiguration::from_document(doc)?)
}

impl ApplicationConfiguration {
    /// Configuration with no components, used as a deployment target.
    pub fn empty() -> Self {
        Self {
            root: CompositeComponent {
                name: ROOT_COMPOSITE.to_string(),
                children: Vec::new(),
                internal_wiring: Vec::new(),
            },
            wiring: Vec::new(),
            containers: Vec::new(),
            data_stores: Vec::new(),
            queues: Vec::new(),
            version: 1,
        }
    }

    pub fn from_document(doc: ApplicationDocument) -> Result<Self, ValidationError> {
        let comp_err = |s: String| ValidationError::Composition(s);
        let mut leaves: BTreeMap<String, ComponentDescriptor> = BTreeMap::new();
        let mut order = Vec::new();
        for d in doc.components {
            d.validate()?;
            order.push(d.name.clone());
            if leaves.insert(d.name.clone(), d).is_some() {
                return Err(comp_err(format!("component `{}` declared twice", order.last().unwrap())));
            }
        }
        let mut composites: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut comp_order = Vec::new();
        for c in doc.composites {
            if leaves.contains_key(&c.name) || composites.contains_key(&c.name) {
                return Err(comp_err(format!("name `{}` used twice", c.name)));
            }
            comp_order.push(c.name.clone());
            composites.insert(c.name, c.children);
        }
        let mut parent: BTreeMap<String, String> = BTreeMap::new();
        for (name, children) in &composites {
            for child in children {
                if !leaves.contains_key(child) && !composites.contains_key(child) {
                    return Err(comp_err(format!(
                        "composite `{name}` lists unknown child `{child}`"
                    )));
                }
                if parent.insert(child.clone(), name.clone()).is_some() {
                    return Err(comp_err(format!("`{child}` has more than one parent")));
                }
            }
        }
        for name in composites.keys() {
            let mut seen = BTreeSet::from([name.clone()]);
            let mut cur = name;
            while let Some(p) = parent.get(cur) {
                if !seen.insert(p.clone()) {
                    return Err(comp_err(format!("composite cycle through `{name}`")));
                }
                cur = p;
            }
        }

        fn build(
            name: &str,
            composites: &BTreeMap<String, Vec<String>>,
            leaves: &BTreeMap<String, ComponentDescriptor>,
        ) -> CompositeComponent {
            let children = composites[name]
                .iter()
                .map(|c| match leaves.get(c) {
                    Some(d) => CompositeChild::Leaf(d.clone()),
                    None => CompositeChild::Composite(build(c, composites, leaves)),
                })
                .collect();
            CompositeComponent {
                name: name.to_string(),
                children,
                internal_wiring: Vec::new(),
            }
        }

        let tops: Vec<&String> = comp_order.iter().filter(|c| !parent.contains_key(*c)).collect();
        let loose: Vec<&String> = order.iter().filter(|c| !parent.contains_key(*c)).collect();
        let mut root = if tops.len() == 1 && loose.is_empty() {
            build(tops[0], &composites, &leaves)
        } else {
            if composites.contains_key(ROOT_COMPOSITE) || leaves.contains_key(ROOT_COMPOSITE) {
                return Err(comp_err(format!(
                    "`{ROOT_COMPOSITE}` is reserved for the implicit root"
                )));
            }
            let mut children = Vec::new();
            for c in &comp_order {
                if !parent.contains_key(c) {
                    children.push(CompositeChild::Composite(build(c, &composites, &leaves)));
                }
            }
            for c in &order {
                if !parent.contains_key(c) {
                    children.push(CompositeChild::Leaf(leaves[c].clone()));
                }
            }
            CompositeComponent {
                name: ROOT_COMPOSITE.to_string(),
                children,
                internal_wiring: Vec::new(),
            }
        };
        assign_internal_wiring(&mut root, &doc.wiring);

        let config = ApplicationConfiguration {
            root,
            wiring: doc.wiring,
            containers: doc.containers,
            data_stores: doc.data_stores,
            queues: doc.queues,
            version: doc.version,
        };
        config.validate_containers()?;
        if let Some(first) = check_composition(&config).findings.into_iter().next() {
            return Err(ValidationError::Inconsistent(first));
        }
        Ok(config)
    }

    fn validate_containers(&self) -> Result<(), ValidationError> {
        for c in &self.containers {
            c.validate()?;
        }
        Ok(())
    }

    pub fn to_document(&self) -> ApplicationDocument {
        let mut composites = Vec::new();
        fn walk(c: &CompositeComponent, out: &mut Vec<CompositeDoc>, is_root: bool) {
            if !is_root || c.name != ROOT_COMPOSITE {
                out.push(CompositeDoc {
                    name: c.name.clone(),
                    children: c.children.iter().map(|x| x.name().to_string()).collect(),
                });
            }
            for child in &c.children {
                if let CompositeChild::Composite(sub) = child {
                    walk(sub, out, false);
                }
            }
        }
        walk(&self.root, &mut composites, true);
        ApplicationDocument {
            components: self.root.leaves().into_iter().cloned().collect(),
            composites,
            wiring: self.wiring.clone(),
            containers: self.containers.clone(),
            data_stores: self.data_stores.clone(),
            queues: self.queues.clone(),
            version: self.version,
        }
    }

    pub fn components(&self) -> Vec<&ComponentDescriptor> {
        self.root.leaves()
    }

    pub fn component_names(&self) -> BTreeSet<String> {
        self.root.leaves().into_iter().map(|d| d.name.clone()).collect()
    }

    pub fn component(&self, name: &str) -> Option<&ComponentDescriptor> {
        self.root.leaves().into_iter().find(|d| d.name == name)
    }

    pub fn container(&self, name: &str) -> Option<&ContainerSpec> {
        self.containers.iter().find(|c| c.hosted_component == name)
    }

    pub fn container_mut(&mut self, name: &str) -> Option<&mut ContainerSpec> {
        self.containers.iter_mut().find(|c| c.hosted_component == name)
    }

    pub fn data_store(&self, name: &str) -> Option<&DataStoreSpec> {
        self.data_stores.iter().find(|s| s.name == name)
    }

    /// `Some(Some(p))` wired to `p`, `Some(None)` declared external, `None`
    /// unwired.
    pub fn provider_of(&self, requirer: &str, interface: &str) -> Option<Option<&str>> {
        self.wiring
            .iter()
            .find(|w| w.requirer == requirer && w.interface == interface)
            .map(|w| w.provider.as_deref())
    }

    /// Parent composite of a leaf (or the root for top-level leaves).
    pub fn parent_of(&self, leaf: &str) -> Option<String> {
        self.root.path_to(leaf).and_then(|p| p.last().cloned())
    }

    /// Replaces the hosted descriptor of an existing component.
    pub fn replace_component(&mut self, new: ComponentDescriptor) -> bool {
        match self.root.leaf_mut(&new.name) {
            Some(slot) => {
                *slot = new;
                true
            }
            None => false,
        }
    }

    /// Removes a component together with its container and the wires that
    /// name it as requirer. Wires pointing at it are left dangling so the
    /// consistency check reports them.
    pub fn remove_component(&mut self, name: &str) -> bool {
        let removed = self.root.remove_leaf(name);
        if removed {
            self.containers.retain(|c| c.hosted_component != name);
            self.wiring.retain(|w| w.requirer != name);
            assign_internal_wiring(&mut self.root, &self.wiring);
        }
        removed
    }

    /// Adds top-level components with default containers.
    pub fn add_component(&mut self, d: ComponentDescriptor, container: ContainerSpec) {
        self.root.children.push(CompositeChild::Leaf(d));
        self.containers.push(container);
    }

    pub fn set_wiring(&mut self, wiring: Vec<Wire>) {
        self.wiring = wiring;
        assign_internal_wiring(&mut self.root, &self.wiring);
    }
}

/// One consistency problem found in a configuration.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "finding")]
pub enum Finding {
    UnwiredRequirement { component: String, interface: String },
    DuplicateWire { component: String, interface: String },
    UnknownRequirer { component: String, interface: String },
    UnknownProvider { requirer: String, interface: String, provider: String },
    MissingInterface { requirer: String, interface: String, provider: String },
    SignatureMismatch {
        requirer: String,
        interface: String,
        provider: String,
        operation: String,
    },
    DanglingStore { component: String, store: String },
    DanglingQueue { component: String, queue: String },
    MissingContainer { component: String },
    DuplicateContainer { component: String },
    OrphanContainer { container: String },
    OrphanedHeldCall {
        invocation: u64,
        component: String,
        interface: String,
        operation: String,
    },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::UnwiredRequirement { component, interface } => {
                write!(f, "`{component}` requires `{interface}` but it is not wired")
            }
            Finding::DuplicateWire { component, interface } => {
                write!(f, "`{component}` has more than one wire for `{interface}`")
            }
            Finding::UnknownRequirer { component, interface } => {
                write!(f, "wire for `{interface}` names unknown or non-requiring `{component}`")
            }
            Finding::UnknownProvider { requirer, interface, provider } => {
                write!(f, "`{requirer}`.`{interface}` wired to unknown `{provider}`")
            }
            Finding::MissingInterface { requirer, interface, provider } => write!(
                f,
                "`{requirer}` wired to `{provider}` for `{interface}`, which it does not provide"
            ),
            Finding::SignatureMismatch { requirer, interface, provider, operation } => write!(
                f,
                "`{requirer}` calls `{interface}.{operation}` but `{provider}` does not provide it"
            ),
            Finding::DanglingStore { component, store } => {
                write!(f, "`{component}` references missing data store `{store}`")
            }
            Finding::DanglingQueue { component, queue } => {
                write!(f, "`{component}` references missing queue `{queue}`")
            }
            Finding::MissingContainer { component } => write!(f, "`{component}` has no container"),
            Finding::DuplicateContainer { component } => {
                write!(f, "`{component}` has more than one container")
            }
            Finding::OrphanContainer { container } => {
                write!(f, "container hosts unknown component `{container}`")
            }
            Finding::OrphanedHeldCall { invocation, component, interface, operation } => write!(
                f,
                "held invocation {invocation} targets `{component}.{interface}.{operation}`, absent after the swap"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub findings: Vec<Finding>,
}

impl ConsistencyReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Lists every composition problem in `config`. Never fails.
pub fn check_composition(config: &ApplicationConfiguration) -> ConsistencyReport {
    let mut findings = BTreeSet::new();
    let leaves: BTreeMap<&str, &ComponentDescriptor> = config
        .root
        .leaves()
        .into_iter()
        .map(|d| (d.name.as_str(), d))
        .collect();

    let mut wire_count: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for w in &config.wiring {
        *wire_count.entry((&w.requirer, &w.interface)).or_default() += 1;
        let Some(req) = leaves.get(w.requirer.as_str()) else {
            findings.insert(Finding::UnknownRequirer {
                component: w.requirer.clone(),
                interface: w.interface.clone(),
            });
            continue;
        };
        if !req.required.contains(&w.interface) {
            findings.insert(Finding::UnknownRequirer {
                component: w.requirer.clone(),
                interface: w.interface.clone(),
            });
            continue;
        }
        let Some(provider) = &w.provider else { continue };
        let Some(prov) = leaves.get(provider.as_str()) else {
            findings.insert(Finding::UnknownProvider {
                requirer: w.requirer.clone(),
                interface: w.interface.clone(),
                provider: provider.clone(),
            });
            continue;
        };
        let Some(iface) = prov.provided_interface(&w.interface) else {
            findings.insert(Finding::MissingInterface {
                requirer: w.requirer.clone(),
                interface: w.interface.clone(),
                provider: provider.clone(),
            });
            continue;
        };
        for op in &req.operations {
            let Some(a) = &op.effect_automaton else { continue };
            for label in a.labels() {
                if label.interface == w.interface && !iface.has_operation(&label.operation) {
                    findings.insert(Finding::SignatureMismatch {
                        requirer: w.requirer.clone(),
                        interface: w.interface.clone(),
                        provider: provider.clone(),
                        operation: label.operation.clone(),
                    });
                }
            }
        }
    }
    for (&(component, interface), &n) in &wire_count {
        if n > 1 {
            findings.insert(Finding::DuplicateWire {
                component: component.to_string(),
                interface: interface.to_string(),
            });
        }
    }
    for d in leaves.values() {
        for r in &d.required {
            if !wire_count.contains_key(&(d.name.as_str(), r.as_str())) {
                findings.insert(Finding::UnwiredRequirement {
                    component: d.name.clone(),
                    interface: r.clone(),
                });
            }
        }
        if let Some(store) = &d.data_store {
            if config.data_store(store).is_none() {
                findings.insert(Finding::DanglingStore {
                    component: d.name.clone(),
                    store: store.clone(),
                });
            }
        }
        if let Some(q) = &d.queue {
            if !config.queues.contains(q) {
                findings.insert(Finding::DanglingQueue {
                    component: d.name.clone(),
                    queue: q.clone(),
                });
            }
        }
        match config
            .containers
            .iter()
            .filter(|c| c.hosted_component == d.name)
            .count()
        {
            0 => {
                findings.insert(Finding::MissingContainer {
                    component: d.name.clone(),
                });
            }
            1 => {}
            _ => {
                findings.insert(Finding::DuplicateContainer {
                    component: d.name.clone(),
                });
            }
        }
    }
    for c in &config.containers {
        if !leaves.contains_key(c.hosted_component.as_str()) {
            findings.insert(Finding::OrphanContainer {
                container: c.hosted_component.clone(),
            });
        }
    }
    ConsistencyReport {
        findings: findings.into_iter().collect(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::sefa::{AutomatonSpec, TransitionSpec};
    use proptest::prelude::*;

    pub(crate) fn iface(name: &str, ops: &[&str]) -> ProvidedInterface {
        ProvidedInterface {
            name: name.into(),
            operations: ops
                .iter()
                .map(|o| OperationSignature {
                    name: o.to_string(),
                    params: vec![],
                    returns: "void".into(),
                })
                .collect(),
            access: Access::Local,
        }
    }

    pub(crate) fn calls(labels: &[(&str, &str, u64)]) -> Arc<ServiceEffectAutomaton> {
        let n = labels.len();
        let states: Vec<String> = (0..=n).map(|i| format!("q{i}")).collect();
        Arc::new(
            AutomatonSpec {
                initial: states[0].clone(),
                finals: vec![states[n].clone()],
                transitions: labels
                    .iter()
                    .enumerate()
                    .map(|(i, (iface, op, d))| TransitionSpec {
                        from: states[i].clone(),
                        to: states[i + 1].clone(),
                        calls_interface: iface.to_string(),
                        calls_operation: op.to_string(),
                        min_delay: *d,
                    })
                    .collect(),
                states,
            }
            .try_into()
            .unwrap(),
        )
    }

    pub(crate) fn stateless(name: &str, provides: &str, requires: &[&str]) -> ComponentDescriptor {
        ComponentDescriptor {
            name: name.into(),
            version: 1,
            kind: ComponentKind::StatelessSession,
            provided: vec![iface(provides, &["run"])],
            required: requires.iter().map(|s| s.to_string()).collect(),
            operations: vec![OperationSpec {
                name: "run".into(),
                tx_attribute: TxAttribute::StartsNew,
                duration: 5,
                effect_automaton: Some(calls(
                    &requires.iter().map(|r| (*r, "run", 1)).collect::<Vec<_>>(),
                )),
            }],
            state_fields: vec![],
            entity_schema: vec![],
            data_store: None,
            queue: None,
        }
    }

    fn demo_text() -> String {
        std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/demo_app.json"
        ))
        .unwrap()
    }

    #[test]
    fn minimal_document_loads() {
        let text = r#"{
            "components": [{"name": "S", "version": 1, "kind": "StatelessSession",
                "provided": [{"name": "IS", "operations": [{"name": "run"}]}],
                "operations": [{"name": "run", "tx_attribute": "StartsNew", "duration": 5}]}],
            "containers": [{"hosted_component": "S",
                "interceptor_chain": ["RedeployBarrier", "TxDemarcation", "Pooling"], "pool_size": 2}],
            "version": 1
        }"#;
        let cfg = load_application(text).unwrap();
        assert_eq!(cfg.containers.len(), 1);
        assert!(cfg.wiring.is_empty());
        assert_eq!(cfg.root.name, ROOT_COMPOSITE);
    }

    #[test]
    fn unwired_requirement_is_rejected() {
        let text = r#"{
            "components": [{"name": "S", "version": 1, "kind": "StatelessSession",
                "provided": [{"name": "IS", "operations": [{"name": "run"}]}],
                "required": ["I"],
                "operations": [{"name": "run", "tx_attribute": "StartsNew", "duration": 5}]}],
            "containers": [{"hosted_component": "S",
                "interceptor_chain": ["TxDemarcation", "Pooling"], "pool_size": 2}],
            "version": 1
        }"#;
        match load_application(text) {
            Err(ModelError::Validation(ValidationError::Inconsistent(
                Finding::UnwiredRequirement { component, interface },
            ))) => {
                assert_eq!(component, "S");
                assert_eq!(interface, "I");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_top_level_key_is_a_parse_error() {
        let text = r#"{"components": [], "containers": [], "version": 1, "extra": true}"#;
        assert!(matches!(load_application(text), Err(ModelError::Parse(_))));
    }

    #[test]
    fn demo_document_is_a_chain() {
        let cfg = load_application(&demo_text()).unwrap();
        let edges: BTreeSet<(String, String)> = cfg
            .wiring
            .iter()
            .filter_map(|w| w.provider.clone().map(|p| (w.requirer.clone(), p)))
            .collect();
        assert_eq!(
            edges,
            BTreeSet::from([("A".into(), "B".into()), ("B".into(), "C".into())])
        );
        assert!(check_composition(&cfg).is_empty());
    }

    #[test]
    fn chain_order_is_enforced() {
        let mut c = ContainerSpec::with_defaults("X");
        assert!(c.validate().is_ok());
        c.interceptor_chain = vec![InterceptorKind::Pooling, InterceptorKind::TxDemarcation];
        assert!(c.validate().is_err());
        c.interceptor_chain = vec![
            InterceptorKind::TxDemarcation,
            InterceptorKind::RedeployBarrier,
            InterceptorKind::Pooling,
        ];
        assert!(c.validate().is_err());
    }

    #[test]
    fn descriptor_kind_invariants() {
        let mut d = stateless("S", "IS", &[]);
        d.state_fields = vec!["a".into()];
        assert!(d.validate().is_err());

        let mut e = stateless("E", "IE", &[]);
        e.kind = ComponentKind::Entity;
        assert!(e.validate().is_err());
        e.entity_schema = vec!["id".into()];
        e.data_store = Some("db".into());
        assert!(e.validate().is_ok());

        let mut m = stateless("M", "IM", &[]);
        m.kind = ComponentKind::MessageDriven;
        m.queue = Some("q".into());
        assert!(m.validate().is_ok());
        m.provided.push(iface("Other", &[]));
        assert!(m.validate().is_err());
    }

    #[test]
    fn diff_functional_structural_nonfunctional() {
        let old = stateless("S", "IS", &["B"]);
        let mut new = old.clone();
        new.version = 2;
        new.operations[0].effect_automaton = Some(calls(&[("B", "run", 4)]));
        assert_eq!(diff_versions(&old, &new), Ok(ChangeKind::Functional));

        let mut added = old.clone();
        added.version = 2;
        added.provided[0] = iface("IS", &["run", "extra"]);
        added.operations.push(OperationSpec {
            name: "extra".into(),
            tx_attribute: TxAttribute::None,
            duration: 1,
            effect_automaton: None,
        });
        assert_eq!(diff_versions(&old, &added), Ok(ChangeKind::Structural));

        let mut bump = old.clone();
        bump.version = 2;
        assert_eq!(diff_versions(&old, &bump), Ok(ChangeKind::NonFunctional));
    }

    #[test]
    fn diff_errors() {
        let old = stateless("S", "IS", &[]);
        let other = stateless("T", "IS", &[]);
        assert!(matches!(diff_versions(&old, &other), Err(DiffError::NameMismatch { .. })));
        assert!(matches!(diff_versions(&old, &old), Err(DiffError::VersionError { .. })));
    }

    #[test]
    fn signature_mismatch_and_dangling_store() {
        let mut cfg = load_application(&demo_text()).unwrap();
        let mut c = cfg.component("C").unwrap().clone();
        c.provided[0].operations.clear();
        c.operations.clear();
        c.provided[0].operations.push(OperationSignature {
            name: "other".into(),
            params: vec![],
            returns: "void".into(),
        });
        c.operations.push(OperationSpec {
            name: "other".into(),
            tx_attribute: TxAttribute::Joins,
            duration: 1,
            effect_automaton: None,
        });
        cfg.replace_component(c);
        let r = check_composition(&cfg);
        assert_eq!(r.findings.len(), 1);
        assert!(matches!(r.findings[0], Finding::SignatureMismatch { .. }));

        let mut cfg = load_application(&demo_text()).unwrap();
        let store = cfg.component("C").unwrap().data_store.clone().unwrap();
        cfg.data_stores.retain(|s| s.name != store);
        let r = check_composition(&cfg);
        assert_eq!(
            r.findings,
            vec![Finding::DanglingStore {
                component: "C".into(),
                store
            }]
        );
    }

    #[test]
    fn nested_composites_and_parents() {
        let text = r#"{
            "components": [
              {"name": "A", "version": 1, "kind": "StatelessSession",
               "provided": [{"name": "IA", "operations": [{"name": "run"}]}], "required": ["IB"],
               "operations": [{"name": "run", "tx_attribute": "StartsNew", "duration": 2}]},
              {"name": "B", "version": 1, "kind": "StatelessSession",
               "provided": [{"name": "IB", "operations": [{"name": "run"}]}],
               "operations": [{"name": "run", "tx_attribute": "Joins", "duration": 2}]}],
            "composites": [{"name": "sub", "children": ["A", "B"]}],
            "wiring": [{"requirer": "A", "interface": "IB", "provider": "B"}],
            "containers": [
              {"hosted_component": "A", "interceptor_chain": ["TxDemarcation", "Pooling"], "pool_size": 1},
              {"hosted_component": "B", "interceptor_chain": ["TxDemarcation", "Pooling"], "pool_size": 1}],
            "version": 3
        }"#;
        let cfg = load_application(text).unwrap();
        assert_eq!(cfg.root.name, "sub");
        assert_eq!(cfg.parent_of("A").as_deref(), Some("sub"));
        assert_eq!(cfg.root.internal_wiring.len(), 1);
        let doc = cfg.to_document();
        assert_eq!(ApplicationConfiguration::from_document(doc).unwrap(), cfg);
    }

    fn arb_tree() -> impl Strategy<Value = CompositeComponent> {
        let leaf = "[a-z]{1,4}".prop_map(|n| CompositeChild::Leaf(stateless(&n, "I", &[])));
        let child = leaf.prop_recursive(3, 16, 4, |inner| {
            ("[A-Z]{1,3}", prop::collection::vec(inner, 0..4)).prop_map(|(name, children)| {
                CompositeChild::Composite(CompositeComponent {
                    name,
                    children,
                    internal_wiring: vec![],
                })
            })
        });
        fn rename(c: &mut CompositeComponent, next: &mut usize) {
            for child in &mut c.children {
                if let CompositeChild::Composite(sub) = child {
                    *next += 1;
                    sub.name = format!("{}{}", sub.name, next);
                    rename(sub, next);
                }
            }
        }
        prop::collection::vec(child, 0..5).prop_map(|children| {
            let mut root = CompositeComponent {
                name: ROOT_COMPOSITE.into(),
                children,
                internal_wiring: vec![],
            };
            rename(&mut root, &mut 0);
            root
        })
    }

    proptest! {
        #[test]
        fn flatten_then_renest_is_identity(tree in arb_tree()) {
            let flat = tree.flatten();
            prop_assert_eq!(CompositeComponent::renest(&flat, &[]), Some(tree));
        }

        #[test]
        fn diff_is_pure_and_structural_dominates(dur in 1u64..50, add_op in any::<bool>(), bump in 1u64..4) {
            let old = stateless("S", "IS", &[]);
            let mut new = old.clone();
            new.version += bump;
            new.operations[0].duration = dur;
            if add_op {
                new.provided[0] = iface("IS", &["run", "more"]);
                new.operations.push(OperationSpec {
                    name: "more".into(),
                    tx_attribute: TxAttribute::Joins,
                    duration: 1,
                    effect_automaton: None,
                });
            }
            let first = diff_versions(&old, &new);
            prop_assert_eq!(first.clone(), diff_versions(&old, &new));
            let expected = if add_op {
                ChangeKind::Structural
            } else if dur != 5 {
                ChangeKind::Functional
            } else {
                ChangeKind::NonFunctional
            };
            prop_assert_eq!(first, Ok(expected));
        }
    }
}
