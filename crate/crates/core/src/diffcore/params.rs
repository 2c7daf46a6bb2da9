use std::collections::HashMap;

use super::DiffError;

/// Flat row-major tensor with a recorded shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Index of a registered parameter. Only valid for the set that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Named parameters with same-shaped gradient buffers and trainable flags.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateName(name.to_string()));
        }
        let expected: usize = value.shape.iter().product();
        if expected != value.data.len() {
            return Err(DiffError::ShapeData {
                name: name.to_string(),
                shape: value.shape.clone(),
                expected,
                got: value.data.len(),
            });
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: vec![0.0; value.data.len()],
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| DiffError::UnknownName(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].value.shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value.data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value.data
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    /// Value and gradient buffer of one parameter, borrowed together.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &mut [f64]) {
        let e = &mut self.entries[id.0];
        (&mut e.value.data, &mut e.grad)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes every parameter matched by some pattern and unfreezes the rest.
    ///
    /// Patterns are globs where `*` matches any run of characters. A pattern
    /// that matches nothing is an error; it usually means a typo in a strategy.
    pub fn set_freeze_mask<S: AsRef<str>>(&mut self, patterns: &[S]) -> Result<(), DiffError> {
        for p in patterns {
            let p = p.as_ref();
            if !self.entries.iter().any(|e| glob_match(p, &e.name)) {
                return Err(DiffError::UnmatchedPattern(p.to_string()));
            }
        }
        for e in &mut self.entries {
            e.trainable = !patterns.iter().any(|p| glob_match(p.as_ref(), &e.name));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.data.len()).sum()
    }
}

/// Glob match supporting `*` (any run, possibly empty). Everything else is literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = name.chars().collect();
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, si));
            pi += 1;
        } else if pi < p.len() && p[pi] == s[si] {
            pi += 1;
            si += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        for name in [
            "encoder.l0.weight",
            "encoder.l0.bias",
            "expert.l0.weight",
            "completion_head.l0.weight",
        ] {
            ps.register(name, Tensor::zeros(&[2, 3])).unwrap();
        }
        ps
    }

    #[test]
    fn glob_cases() {
        assert!(glob_match("encoder.*", "encoder.l0.weight"));
        assert!(!glob_match("encoder.*", "expert.l0.weight"));
        assert!(glob_match("*", ""));
        assert!(glob_match("*.bias", "encoder.l1.bias"));
        assert!(glob_match("a*b*c", "aXXbYc"));
        assert!(!glob_match("a*b*c", "aXXbY"));
        assert!(glob_match("exact", "exact"));
    }

    #[test]
    fn duplicate_and_unknown_names() {
        let mut ps = sample();
        assert_eq!(
            ps.register("encoder.l0.bias", Tensor::zeros(&[1])),
            Err(DiffError::DuplicateName("encoder.l0.bias".into()))
        );
        assert!(matches!(ps.id("nope"), Err(DiffError::UnknownName(_))));
        for name in ps.names().map(str::to_string).collect::<Vec<_>>() {
            assert!(ps.id(&name).is_ok());
        }
    }

    #[test]
    fn shape_must_match_data() {
        let mut ps = ParamSet::new();
        let bad = Tensor {
            shape: vec![2, 2],
            data: vec![0.0; 3],
        };
        assert!(matches!(
            ps.register("w", bad),
            Err(DiffError::ShapeData { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn gradient_buffers_match_shapes() {
        let ps = sample();
        for id in ps.ids() {
            assert_eq!(ps.grad(id).len(), ps.value(id).len());
        }
    }

    #[test]
    fn freeze_masks() {
        let mut ps = sample();
        ps.set_freeze_mask::<&str>(&[]).unwrap();
        assert!(ps.ids().all(|id| ps.is_trainable(id)));

        ps.set_freeze_mask(&["encoder.*"]).unwrap();
        for id in ps.ids() {
            assert_eq!(ps.is_trainable(id), !ps.name(id).starts_with("encoder."));
        }

        ps.set_freeze_mask(&["*"]).unwrap();
        assert!(ps.ids().all(|id| !ps.is_trainable(id)));

        assert_eq!(
            ps.set_freeze_mask(&["encodr.*"]),
            Err(DiffError::UnmatchedPattern("encodr.*".into()))
        );
    }
}
