#!/usr/bin/env python3
"""Smoke test for the fame_py extension module.

Loads the cdylib straight from the cargo target directory (no install
step), then exercises the solver, the distance measures, the three
integration rules, the oracle suites, and a miniature end-to-end run.
"""

import importlib.util
import pathlib
import sys


def load_module():
    root = pathlib.Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / "release" / "libfame_py.so",
        root / "target" / "debug" / "libfame_py.so",
        root / "python" / "fame_py.so",
    ]
    for path in candidates:
        if path.exists():
            spec = importlib.util.spec_from_file_location("fame_py", path)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            print(f"loaded fame_py from {path}")
            return module
    sys.exit("build the module first: cargo build -p fame-py")


fame = load_module()


def check(name, cond):
    status = "ok" if cond else "FAIL"
    print(f"  {name}: {status}")
    if not cond:
        sys.exit(1)


print("== solver ==")
mdp = fame.generate_gridworld(5, 5, seed=7, slip=0.1, goal=(4, 4))
check("state space", mdp.n_states == 25 and mdp.n_actions == 4)
row = mdp.transition_row(0, 3)
check("row stochastic", abs(sum(row) - 1.0) < 1e-12)
q = fame.value_iteration(mdp, tol=1e-10)
check("greedy policy shape", len(q.greedy_policy()) == 25)

# single self-loop state, r = 1, gamma = 0.9: Q* = 10
tiny = fame.QTable(1, 1, [0.0])
check("qtable roundtrip", tiny.get(0, 0) == 0.0)

print("== distances ==")
check("w2 closed form", abs(fame.w2_squared([2.0], [3.0], [0.0], [1.0]) - 8.0) < 1e-12)
q2 = fame.value_iteration(fame.generate_gridworld(5, 5, seed=8, slip=0.1, goal=(0, 4)), tol=1e-10)
check("distance positive", fame.mdp_distance_q(q, q2) > 0.0)
check("distance self zero", fame.mdp_distance_q(q, q) == 0.0)
check("policy distance symmetric",
      abs(fame.mdp_distance_pi(q, q2) - fame.mdp_distance_pi(q2, q)) < 1e-12)

# one state, one action, weight 1, values 1 vs 3: squared-l2 CF = 4
cf = fame.cf_q_value(fame.QTable(1, 1, [1.0]), fame.QTable(1, 1, [3.0]), [1.0])
check("cf_q literal", abs(cf - 4.0) < 1e-12)
cf0 = fame.cf_pi_categorical([0.5, 0.5], [0.5, 0.5], [1.0], 2)
check("cf_pi self zero", cf0 == 0.0)

print("== integration rules ==")
meta = fame.MetaState.new_q_l2(1, 1)
meta.integrate_q_l2(fame.QTable(1, 1, [0.0]), [1.0], 0)
meta.integrate_q_l2(fame.QTable(1, 1, [2.0]), [1.0], 1)
check("l2 equal-weight average", abs(meta.q_values()[0] - 1.0) < 1e-12)
check("tasks integrated", meta.tasks_integrated == 2)

kl = fame.MetaState.new_softmax_kl(1, 2, smoothing_eps=0.0)
kl.integrate_softmax_kl([0.75, 0.25], 1, 2, 0)
probs = kl.policy_probs()
check("softmax-kl MLE", abs(probs[0] - 0.75) < 1e-12)

wd = fame.MetaState.new_gaussian(2, 1)
wd.integrate_policy_wd([0.0, 2.0], [1.0, 3.0], [0.5, 0.5], 0)
wd.integrate_policy_wd([2.0, 2.0], [3.0, 3.0], [0.5, 0.5], 1)
mean, std = wd.gaussian_params()
check("wd equal-weight average", abs(mean[0] - 1.0) < 1e-12 and abs(std[0] - 2.0) < 1e-12)

print("== oracle suites ==")
for suite in ["l2", "wd", "kl", "w2-closed-form"]:
    report = fame.oracle_check(suite, instances=10, seed=1)
    check(f"oracle {suite}", report["passed"])

print("== end-to-end run ==")
config = """
method = "fame-q"
seed = 3

[sequence]
kind = "gridworld"
steps_per_task = 1500
task_seeds = [1, 2, 1]
max_episode_steps = 30
goal_cells = [[5, 5], [3, 5], [5, 5]]

[sequence.gridworld]
width = 6
height = 6
slip = 0.05
gamma = 0.95
goal_reward = 10.0

[learner]
learning_rate = 0.25
epsilon_end = 0.03

[warmup]
n_eval_episodes = 4

[eval]
points_per_task = 10
episodes_per_point = 4
"""
a = fame.run_from_toml(config)
b = fame.run_from_toml(config)
check("deterministic avg_perf", a["avg_perf"] == b["avg_perf"])
check("deterministic curves", a["curves_report"] == b["curves_report"])
check("three warm-up decisions", len(a["warmup_decisions"]) == 3)
check("first task resets", a["warmup_decisions"][0] == "random")
check("curve grid spans the sequence", a["curve_grid"][-1] == 3 * 1500)
reset = fame.run_from_toml(config, method="reset")
check("reset never meta", all(d == "random" for d in reset["warmup_decisions"]))

print("all smoke checks passed")
