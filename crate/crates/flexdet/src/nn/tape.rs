//! The gradient tape.
//!
//! A [`Var`] owns its value (shared, copy-on-write) and optionally points at a
//! node on a [`Tape`]. Operators compute the output value eagerly; when at
//! least one input is a recorded node and the tape is recording, they push a
//! backward closure that routes the upstream gradient to the inputs. Constants
//! (targets, detached teacher outputs, positional tables) are plain `Var`s
//! with no node — gradient flow stops at them by construction, which is what
//! makes "the teacher is frozen" a structural property rather than a runtime
//! check.
//!
//! `backward` walks nodes in reverse creation order, so any single tape is
//! already topologically sorted. Gradients for non-retained nodes are dropped
//! as soon as they have been propagated, which keeps peak memory close to the
//! largest single activation rather than the whole graph.

use ndarray::ArrayD;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// The tensor type used throughout the crate.
pub type Arr = ArrayD<f64>;

type BackFn = Box<dyn FnOnce(&Arr, &mut GradSink)>;

/// Accumulates gradients by node index during the backward sweep.
pub struct GradSink {
    grads: Vec<Option<Arr>>,
}

impl GradSink {
    /// Add `g` into the slot for node `idx`.
    pub fn add(&mut self, idx: usize, g: Arr) {
        match &mut self.grads[idx] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Add a lazily-computed gradient if the target is a recorded node.
    /// Constants pass `None` and the closure is never evaluated.
    pub fn add_to(&mut self, idx: Option<usize>, g: impl FnOnce() -> Arr) {
        if let Some(i) = idx {
            self.add(i, g());
        }
    }
}

struct TapeInner {
    backs: Vec<Option<BackFn>>,
    retain: Vec<bool>,
    /// Parameter-name → node index, for collecting grads after backward.
    params: Vec<(String, usize)>,
    recording: bool,
    consumed: bool,
}

/// A recording of one forward computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    /// A new tape. With `recording = false` no nodes are ever created and
    /// `Var`s built against it are plain constants — use this for evaluation
    /// forwards.
    pub fn new(recording: bool) -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                backs: Vec::new(),
                retain: Vec::new(),
                params: Vec::new(),
                recording,
                consumed: false,
            })),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, back: Option<BackFn>, retain: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.backs.push(back);
        inner.retain.push(retain);
        inner.backs.len() - 1
    }

    /// A recorded leaf whose gradient is kept after backward. Used by
    /// gradient checks and for binding parameters.
    pub fn leaf(&self, value: Arr) -> Var {
        if !self.is_recording() {
            return Var::constant(value);
        }
        let idx = self.push(None, true);
        Var {
            value: Rc::new(value),
            node: Some((self.clone(), idx)),
        }
    }

    /// Bind a named parameter value to the tape. The gradient can be looked
    /// up by name in the [`GradMap`] returned from [`Tape::backward`].
    pub fn param(&self, name: &str, value: Rc<Arr>) -> Var {
        if !self.is_recording() {
            return Var {
                value,
                node: None,
            };
        }
        let idx = self.push(None, true);
        self.inner
            .borrow_mut()
            .params
            .push((name.to_string(), idx));
        Var {
            value,
            node: Some((self.clone(), idx)),
        }
    }

    /// Internal: record an op output. `inputs` is only used to sanity-check
    /// that everything lives on this tape.
    pub(crate) fn record(&self, value: Arr, back: BackFn) -> Var {
        let idx = self.push(Some(back), false);
        Var {
            value: Rc::new(value),
            node: Some((self.clone(), idx)),
        }
    }

    /// Run reverse-mode accumulation from a scalar `root`. Consumes the
    /// recorded closures; calling twice on one tape is a bug.
    pub fn backward(&self, root: &Var) -> GradMap {
        let (tape, root_idx) = root
            .node
            .as_ref()
            .expect("backward called on a constant with no tape node");
        assert!(
            self.same_tape(tape),
            "backward root belongs to a different tape"
        );
        assert_eq!(
            root.value.len(),
            1,
            "backward expects a scalar root, got shape {:?}",
            root.value.shape()
        );

        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "backward already called on this tape");
        inner.consumed = true;

        let n = inner.backs.len();
        let mut sink = GradSink {
            grads: vec![None; n],
        };
        sink.grads[*root_idx] = Some(Arr::ones(root.value.raw_dim()));

        for i in (0..=*root_idx).rev() {
            let back = inner.backs[i].take();
            let g = if inner.retain[i] {
                sink.grads[i].clone()
            } else {
                sink.grads[i].take()
            };
            let Some(g) = g else { continue };
            if let Some(f) = back {
                f(&g, &mut sink);
            }
        }

        let mut by_name = HashMap::new();
        for (name, idx) in &inner.params {
            if let Some(g) = sink.grads[*idx].take() {
                by_name.insert(name.clone(), g);
            }
        }
        GradMap {
            grads: sink.grads,
            by_name,
        }
    }
}

/// Gradients produced by one backward sweep. Parameters are looked up by
/// name; retained test leaves by the `Var` itself.
pub struct GradMap {
    grads: Vec<Option<Arr>>,
    by_name: HashMap<String, Arr>,
}

impl GradMap {
    /// Gradient of a named parameter, if it participated in the loss.
    pub fn by_name(&self, name: &str) -> Option<&Arr> {
        self.by_name.get(name)
    }

    /// Gradient of a retained leaf `Var`.
    pub fn of(&self, v: &Var) -> Option<&Arr> {
        let (_, idx) = v.node.as_ref()?;
        self.grads.get(*idx).and_then(|g| g.as_ref())
    }

    /// Iterate over all named parameter gradients.
    pub fn iter_named(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.by_name.iter()
    }

    pub fn take_named(self) -> HashMap<String, Arr> {
        self.by_name
    }
}

/// A tensor, optionally attached to a tape node.
#[derive(Clone)]
pub struct Var {
    value: Rc<Arr>,
    node: Option<(Tape, usize)>,
}

impl Var {
    /// A constant: gradient flow stops here.
    pub fn constant(value: Arr) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    /// A scalar constant with shape `[1]`.
    pub fn scalar(v: f64) -> Var {
        Var::constant(Arr::from_elem(ndarray::IxDyn(&[1]), v))
    }

    pub fn value(&self) -> &Arr {
        &self.value
    }

    /// Shared handle to the value (cheap clone for backward closures).
    pub fn value_rc(&self) -> Rc<Arr> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// The single element of a scalar `Var`.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on non-scalar");
        *self.value.iter().next().unwrap()
    }

    /// Node index if recorded.
    pub(crate) fn idx(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, i)| *i)
    }

    /// Detach: same value, no gradient history.
    pub fn detach(&self) -> Var {
        Var {
            value: self.value.clone(),
            node: None,
        }
    }

    /// The tape this op should record on, if any: the first input that is a
    /// live node on a recording tape. Also asserts all noded inputs agree.
    pub(crate) fn recording_tape(inputs: &[&Var]) -> Option<Tape> {
        let mut found: Option<Tape> = None;
        for v in inputs {
            if let Some((t, _)) = &v.node {
                match &found {
                    None => found = Some(t.clone()),
                    Some(f) => debug_assert!(
                        f.same_tape(t),
                        "op inputs recorded on different tapes"
                    ),
                }
            }
        }
        found.filter(|t| t.is_recording())
    }
}

/// A named, trainable tensor. The value is shared copy-on-write: a tape holds
/// `Rc` clones while a step is in flight, and the optimizer's in-place update
/// transparently falls back to clone-then-write if anything still borrows the
/// old value.
pub struct Param {
    name: String,
    value: RefCell<Rc<Arr>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Arr) -> Rc<Param> {
        Rc::new(Param {
            name: name.into(),
            value: RefCell::new(Rc::new(value)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current value (shared handle).
    pub fn value(&self) -> Rc<Arr> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replace the stored value.
    pub fn set(&self, value: Arr) {
        *self.value.borrow_mut() = Rc::new(value);
    }

    /// Mutate the stored value in place (copy-on-write if shared).
    pub fn update(&self, f: impl FnOnce(&mut Arr)) {
        let mut slot = self.value.borrow_mut();
        f(Rc::make_mut(&mut slot));
    }

    /// Bind onto a tape as a named leaf.
    pub fn bind(&self, tape: &Tape) -> Var {
        tape.param(&self.name, self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;
    use ndarray::IxDyn;

    #[test]
    fn constant_times_constant_records_nothing() {
        let tape = Tape::new(true);
        let a = Var::constant(Arr::from_elem(IxDyn(&[3]), 2.0));
        let b = Var::constant(Arr::from_elem(IxDyn(&[3]), 5.0));
        let c = ops::mul(&a, &b);
        assert!(c.idx().is_none());
        assert_eq!(c.value()[[0]], 10.0);
        drop(tape);
    }

    #[test]
    fn backward_through_simple_chain() {
        // y = sum(3 * x * x) at x = [1, 2] → dy/dx = 6x = [6, 12]
        let tape = Tape::new(true);
        let x = tape.leaf(Arr::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap());
        let y = ops::sum_all(&ops::scale(&ops::mul(&x, &x), 3.0));
        assert_eq!(y.item(), 15.0);
        let grads = tape.backward(&y);
        let gx = grads.of(&x).unwrap();
        assert_eq!(gx[[0]], 6.0);
        assert_eq!(gx[[1]], 12.0);
    }

    #[test]
    fn param_grads_collected_by_name() {
        let p = Param::new("w", Arr::from_elem(IxDyn(&[2]), 3.0));
        let tape = Tape::new(true);
        let w = p.bind(&tape);
        let loss = ops::sum_all(&ops::mul(&w, &w));
        let grads = tape.backward(&loss);
        let gw = grads.by_name("w").unwrap();
        assert_eq!(gw[[0]], 6.0);
        assert!(grads.by_name("nope").is_none());
    }

    #[test]
    fn non_recording_tape_yields_constants() {
        let p = Param::new("w", Arr::from_elem(IxDyn(&[2]), 3.0));
        let tape = Tape::new(false);
        let w = p.bind(&tape);
        assert!(w.idx().is_none());
        let y = ops::mul(&w, &w);
        assert!(y.idx().is_none());
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        // loss = sum(x * detach(x)): gradient is detach(x), not 2x.
        let tape = Tape::new(true);
        let x = tape.leaf(Arr::from_shape_vec(IxDyn(&[2]), vec![2.0, 5.0]).unwrap());
        let loss = ops::sum_all(&ops::mul(&x, &x.detach()));
        let grads = tape.backward(&loss);
        let gx = grads.of(&x).unwrap();
        assert_eq!(gx[[0]], 2.0);
        assert_eq!(gx[[1]], 5.0);
    }

    #[test]
    #[should_panic(expected = "backward already called")]
    fn double_backward_panics() {
        let tape = Tape::new(true);
        let x = tape.leaf(Arr::from_elem(IxDyn(&[1]), 1.0));
        let y = ops::scale(&x, 2.0);
        let _ = tape.backward(&y);
        let _ = tape.backward(&y);
    }

    #[test]
    fn param_update_is_copy_on_write() {
        let p = Param::new("w", Arr::from_elem(IxDyn(&[1]), 1.0));
        let held = p.value();
        p.update(|w| w[[0]] = 9.0);
        assert_eq!(held[[0]], 1.0, "old handle must keep the old value");
        assert_eq!(p.value()[[0]], 9.0);
    }
}
