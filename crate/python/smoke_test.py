import batchcause as bc

data, outcomes = bc.generate(n=400, seed=3)
print(data)
assert len(data) == 400 and data.annotated_count() == 0

camp = bc.Campaign(data, budget=0.3, seed=3)
while not camp.run():
    camp.add_labels({i: outcomes[i] for i in camp.pending})
report = camp.report()
print("phase", camp.phase, "tau", [round(e["tau_hat"], 3) for e in report["estimates"]], "spent", round(report["realized_fraction"], 3))

restored = bc.Campaign.from_state_json(camp.state_json(), data)
assert restored.phase == camp.phase

labeled = bc.Dataset(data.ids, data.covariates, data.treatment, [outcomes[i] for i in data.ids])
plan = bc.plan(labeled, budget=0.5)
assert abs(sum(plan["pi"]) / len(labeled) - 0.5) < 1e-6
rep = bc.estimate(labeled, [1.0] * len(labeled))
print("full-data tau", round(rep["tau_hat"], 3))
assert abs(rep["tau_hat"] - 3.0) < 1.0

try:
    bc.plan(labeled, learner="svm")
except ValueError as e:
    print("rejected:", e)
print("ok")
