use eloss::eloss_module;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>) -> R) -> R {
    pyo3::append_to_inittab!(eloss_module);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("eloss").unwrap();
        f(py, &m)
    })
}

#[test]
fn module_round_trip() {
    with_module(|py, m| {
        let locals = PyDict::new(py);
        locals.set_item("eloss", m).unwrap();
        let code = c"
import math
v = eloss.eloss([0.0, 1.0, -1.0], lambda1=1.0, lambda2=1.0)
assert v.deltas == [1.0, -2.0] and v.l2 == -5.0
first = eloss.entropy_first([[0.0], [1.0], [3.0]]).value
kl = eloss.entropy_kl([[0.0], [1.0], [3.0]], k=1).value
gap = first - kl
net = eloss.Network('mlp', seed=3)
logits, shape, taps = net.forward([0.5] * 64, [2, 32])
ok = shape == [2, 4] and len(taps) == 4
try:
    eloss.entropy_kl([[0.0], [1.0]], k=2)
    raised = False
except ValueError:
    raised = True
";
        py.run(code, None, Some(&locals)).unwrap();
        let gap: f64 = locals.get_item("gap").unwrap().unwrap().extract().unwrap();
        let psi3 = 1.0 + 0.5 - 0.577_215_664_901_532_9;
        assert!((gap - (2f64.ln() - psi3)).abs() < 1e-12);
        assert!(locals.get_item("ok").unwrap().unwrap().extract::<bool>().unwrap());
        assert!(locals.get_item("raised").unwrap().unwrap().extract::<bool>().unwrap());
    });
}
