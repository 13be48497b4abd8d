use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::graph::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity of a [`Param`], used to route gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor. Graph nodes share the storage; mutation after the
/// graph is dropped is copy-free.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            value: Arc::new(value),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Mutable access; clones the storage only if a live graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        self.value.clone()
    }
}

impl Clone for Param {
    /// Clones get a new identity so both copies can live on one graph.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            value: Arc::new((*self.value).clone()),
        }
    }
}
