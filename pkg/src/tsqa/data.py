"""Synthetic engine-style signal and QA forge.

Signals are interpretable by construction: every channel is base level plus
trend plus noise, component faults add a severity-scaled offset and noise
inflation on that component's channels, and a small group of wear channels
drifts with the engine's degradation severity regardless of faults. Every
answer letter is recomputable from the spec that generated its signals.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .encoder import save_series

COMPONENTS = ["Fan", "LPC", "HPC", "HPT", "LPT"]
TRENDS = ["rapid-increase", "moderate-increase", "stable", "decrease"]
TREND_SLOPES = {"rapid-increase": 2.0, "moderate-increase": 0.8, "stable": 0.0, "decrease": -1.0}

# channel layout for the default V=32: four sensors per component, four wear
# channels that drift with severity, eight generic context channels
CHANNEL_NAMES = [
    f"{comp.lower()}_{sensor}"
    for comp in COMPONENTS
    for sensor in ("speed", "pressure", "temperature", "vibration")
] + [
    "egt_margin", "fuel_flow_drift", "oil_debris", "thrust_loss",
    "altitude", "mach", "throttle_angle", "ambient_temp",
    "bleed_valve", "inlet_pressure", "bypass_ratio", "humidity",
]

FAULT_OFFSET = 1.5
FAULT_NOISE_GAIN = 1.0
WEAR_DRIFT = 1.5

PERCEPTION_CHOICES = {"a": "Health", "b": "Fault"}
REASONING_CHOICES = {
    "a": "Good Condition",
    "b": "Moderate Condition",
    "c": "Poor Condition",
    "d": "Bad Condition",
    "e": "Extremely Poor Condition",
}
SEVERITY_BUCKETS = [0.2, 0.4, 0.6, 0.8]  # five condition grades


def component_channels(comp, channels):
    idx = COMPONENTS.index(comp)
    return [c for c in range(4 * idx, 4 * idx + 4) if c < channels]


def wear_channels(channels):
    return [c for c in range(20, 24) if c < channels]


def reasoning_letter(mean_severity):
    for letter, bound in zip("abcd", SEVERITY_BUCKETS):
        if mean_severity < bound:
            return letter
    return "e"


@dataclass
class SignalSpec:
    channels: int
    length: int
    base: np.ndarray  # per-channel level
    trends: list  # per-channel trend kind
    noise_scale: float
    faults: dict  # component -> True, empty when healthy
    severity: float
    cycle_index: int


@dataclass
class QARecord:
    id: str
    series: list
    task: str
    question: str
    answer: str
    choices: dict | None = None

    def to_json(self):
        return json.dumps(
            {
                "id": self.id,
                "series": self.series,
                "task": self.task,
                "question": self.question,
                "answer": self.answer,
                "choices": self.choices,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line):
        raw = json.loads(line)
        return cls(
            id=raw["id"],
            series=raw["series"],
            task=raw["task"],
            question=raw["question"],
            answer=raw["answer"],
            choices=raw["choices"],
        )

    @property
    def engine_id(self):
        # series files are named engine{e}_cycle{c}.itts
        stem = os.path.basename(self.series[0])
        return stem.split("_")[0]


def generate_segment(spec: SignalSpec, seed):
    """Render one cycle; deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    t = np.arange(spec.length, dtype=np.float64)[:, None] / spec.length
    slopes = np.array([TREND_SLOPES[k] for k in spec.trends])
    noise = rng.standard_normal((spec.length, spec.channels))
    noise_gain = np.full(spec.channels, spec.noise_scale)
    offset = np.zeros(spec.channels)
    for comp in spec.faults:
        for c in component_channels(comp, spec.channels):
            offset[c] += FAULT_OFFSET * spec.severity
            noise_gain[c] *= 1.0 + FAULT_NOISE_GAIN * spec.severity
    for c in wear_channels(spec.channels):
        offset[c] += WEAR_DRIFT * spec.severity
    return spec.base + t * slopes + noise * noise_gain + offset


@dataclass
class Engine:
    index: int
    faults: dict
    start_severity: float
    rate: float
    base: np.ndarray
    trends: list
    noise_scale: float
    channels: int
    length: int
    cycles: int

    def severity(self, cycle):
        return min(1.0, self.start_severity + self.rate * cycle)

    def spec(self, cycle) -> SignalSpec:
        return SignalSpec(
            channels=self.channels,
            length=self.length,
            base=self.base,
            trends=self.trends,
            noise_scale=self.noise_scale,
            faults=self.faults,
            severity=self.severity(cycle),
            cycle_index=cycle,
        )


def build_engines(seed, count, channels, length, cycles, noise_scale):
    rng = np.random.default_rng(seed)
    engines = []
    for e in range(count):
        faulty = rng.random() < 0.5
        faults = {}
        if faulty:
            for comp in rng.choice(COMPONENTS, size=rng.integers(1, 3), replace=False):
                faults[str(comp)] = True
        engines.append(
            Engine(
                index=e,
                faults=faults,
                start_severity=float(rng.uniform(0.0, 0.7)),
                rate=float(rng.uniform(0.005, 0.05)),
                base=rng.uniform(-0.5, 0.5, size=channels),
                trends=[str(rng.choice(TRENDS)) for _ in range(channels)],
                noise_scale=noise_scale,
                channels=channels,
                length=length,
                cycles=cycles,
            )
        )
    return engines


# -- question / answer templates --------------------------------------------

UNDERSTANDING_QUESTIONS = [
    "What does the change in {channel} represent in the given engine signal during one cycle?",
    "Could you explain what the {channel} signal is doing over this cycle?",
    "How would you describe the behavior of {channel} in this operating cycle?",
    "What trend does the {channel} reading show across the cycle?",
]

TREND_ANSWERS = {
    "rapid-increase": [
        "the {channel} signal is climbing rapidly , which points to a sharply rising demand on the engine .",
        "there is a rapid increase in {channel} , suggesting the engine is working much harder over this cycle .",
        "{channel} shows a fast upward trend , indicating quickly growing load on the system .",
        "the reading for {channel} rises steeply through the cycle , a sign of rapidly increasing stress .",
    ],
    "moderate-increase": [
        "the {channel} signal is increasing moderately , consistent with a controlled rise in engine effort .",
        "there is a moderate increase in {channel} , indicating a gradual and steady growth in load .",
        "{channel} trends gently upward over the cycle , showing a mild increase in demand .",
        "the reading for {channel} climbs slowly , which reflects a measured increase in operation .",
    ],
    "stable": [
        "the {channel} signal remains stable , indicating steady operation without notable stress .",
        "{channel} holds roughly constant across the cycle , a sign of balanced engine behavior .",
        "there is no meaningful trend in {channel} , the signal stays level through the cycle .",
        "the reading for {channel} is flat , showing the engine maintaining a steady state .",
    ],
    "decrease": [
        "the {channel} signal is decreasing , which suggests the load on the engine is easing off .",
        "there is a clear downward trend in {channel} , indicating reduced demand over the cycle .",
        "{channel} falls steadily through the cycle , a sign of declining engine effort .",
        "the reading for {channel} drops over time , reflecting a winding down of operation .",
    ],
}

PERCEPTION_QUESTIONS = [
    "What is the health status of {component} of the given engine signal in one cycle? a: Health b: Fault",
    "Based on this cycle , is the {component} healthy or faulty? a: Health b: Fault",
    "Judge the condition of the {component} from the signal in this cycle . a: Health b: Fault",
    "Does the {component} show a fault signature in this single cycle? a: Health b: Fault",
]

REASONING_QUESTIONS = [
    "Given the engine signal across 10 cycles , what is the qualitative condition of the engine? "
    "a: Good Condition b: Moderate Condition c: Poor Condition d: Bad Condition e: Extremely Poor Condition",
    "By tracking the health decline trend over these 10 cycles , how would you grade the engine? "
    "a: Good Condition b: Moderate Condition c: Poor Condition d: Bad Condition e: Extremely Poor Condition",
    "From the 10 cycle degradation trajectory , what condition grade applies? "
    "a: Good Condition b: Moderate Condition c: Poor Condition d: Bad Condition e: Extremely Poor Condition",
    "Looking at the engine over 10 consecutive cycles , which condition grade fits best? "
    "a: Good Condition b: Moderate Condition c: Poor Condition d: Bad Condition e: Extremely Poor Condition",
]

DECISION_QUESTIONS = [
    "Given the engine signal data collected across 10 cycles , what specific actions should we take to address any potential issues?",
    "What is the maintenance plan for this engine based on the 10 cycle signal?",
    "Given these 10 cycles , what should the crew do about this engine?",
    "Based on the degradation seen over 10 cycles , what actions do you recommend?",
]

DECISION_ANSWERS = {
    ("fault", "severe"): [
        "it is critical to promptly replace the faulty {components} and run a full inspection before the next flight .",
        "we need to swap out the {components} right away , the degradation is too far along to keep flying .",
        "replace the {components} immediately and restrict operations until a complete health check is done .",
        "ground the engine , replace the worn {components} , and verify the remaining systems before release .",
    ],
    ("fault", "mild"): [
        "schedule a repair of the {components} within the next maintenance window and keep monitoring closely .",
        "plan an inspection of the {components} soon , the fault is present but not yet urgent .",
        "book the {components} for scheduled maintenance and watch the trend on following cycles .",
        "keep the engine in service but line up a shop visit for the {components} in the coming days .",
    ],
    ("healthy", "severe"): [
        "no single component is flagged , but overall wear is high , so schedule a thorough general overhaul .",
        "the engine shows heavy general degradation , plan a full inspection even though no fault stands out .",
        "wear levels are high across the board , arrange a comprehensive check at the earliest opportunity .",
        "no component fault detected , yet the wear trend demands a near term maintenance slot .",
    ],
    ("healthy", "mild"): [
        "the engine looks healthy , continue normal operation with routine monitoring .",
        "no action needed beyond standard checks , all components are operating normally .",
        "keep flying as planned , the signals show no fault and only light wear .",
        "continue continuous monitoring , there is nothing that requires maintenance right now .",
    ],
}


def perception_answer(engine: Engine, cycle, component):
    faulty = component in engine.faults and engine.severity(cycle) > 0.0
    return '"b"' if faulty else '"a"'


def decision_answer_key(engine: Engine, window):
    mean_sev = float(np.mean([engine.severity(c) for c in window]))
    severe = mean_sev >= 0.5
    return ("fault" if engine.faults else "healthy", "severe" if severe else "mild")


def _series_name(engine_index, cycle):
    return f"engine{engine_index:03d}_cycle{cycle:02d}.itts"


def _atomic_write_series(path, values):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    os.close(fd)
    try:
        save_series(tmp, values)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def generate_dataset(out_dir, seed, *, engines=50, cycles=12, channels=32, length=600,
                     noise_scale=0.1, counts=None):
    """Write series files and the QA manifest; returns the record list."""
    counts = counts or {"understanding": 500, "perception": 500, "reasoning": 500, "decision": 500}
    series_dir = os.path.join(out_dir, "series")
    os.makedirs(series_dir, exist_ok=True)
    fleet = build_engines(seed, engines, channels, length, cycles, noise_scale)
    for eng in fleet:
        for c in range(cycles):
            values = generate_segment(eng.spec(c), seed=hash_seed(seed, eng.index, c))
            _atomic_write_series(os.path.join(series_dir, _series_name(eng.index, c)), values)

    rng = np.random.default_rng(seed + 1)
    records = []

    def rel(eng, c):
        return os.path.join("series", _series_name(eng.index, c))

    for i in range(counts.get("understanding", 0)):
        eng = fleet[rng.integers(len(fleet))]
        cyc = int(rng.integers(cycles))
        ch = int(rng.integers(channels))
        name = CHANNEL_NAMES[ch] if ch < len(CHANNEL_NAMES) else f"channel_{ch}"
        trend = eng.trends[ch]
        q = str(rng.choice(UNDERSTANDING_QUESTIONS)).format(channel=name)
        a = str(rng.choice(TREND_ANSWERS[trend])).format(channel=name)
        records.append(
            QARecord(f"understanding-{i:05d}", [rel(eng, cyc)], "understanding", q, a)
        )

    for i in range(counts.get("perception", 0)):
        eng = fleet[rng.integers(len(fleet))]
        cyc = int(rng.integers(cycles))
        want_fault = bool(rng.random() < 0.5) and bool(eng.faults)
        if want_fault:
            comp = str(rng.choice(sorted(eng.faults)))
        else:
            healthy = [c for c in COMPONENTS if c not in eng.faults]
            comp = str(rng.choice(healthy)) if healthy else str(rng.choice(COMPONENTS))
        q = str(rng.choice(PERCEPTION_QUESTIONS)).format(component=comp)
        a = perception_answer(eng, cyc, comp)
        records.append(
            QARecord(
                f"perception-{i:05d}", [rel(eng, cyc)], "perception", q, a,
                choices=dict(PERCEPTION_CHOICES),
            )
        )

    for i in range(counts.get("reasoning", 0)):
        eng = fleet[rng.integers(len(fleet))]
        start = int(rng.integers(cycles - 10 + 1))
        window = list(range(start, start + 10))
        mean_sev = float(np.mean([eng.severity(c) for c in window]))
        q = str(rng.choice(REASONING_QUESTIONS))
        a = f'"{reasoning_letter(mean_sev)}"'
        records.append(
            QARecord(
                f"reasoning-{i:05d}", [rel(eng, c) for c in window], "reasoning", q, a,
                choices=dict(REASONING_CHOICES),
            )
        )

    for i in range(counts.get("decision", 0)):
        eng = fleet[rng.integers(len(fleet))]
        start = int(rng.integers(cycles - 10 + 1))
        window = list(range(start, start + 10))
        key = decision_answer_key(eng, window)
        comps = " and ".join(sorted(eng.faults)) if eng.faults else "none"
        q = str(rng.choice(DECISION_QUESTIONS))
        a = str(rng.choice(DECISION_ANSWERS[key])).format(components=comps)
        records.append(
            QARecord(f"decision-{i:05d}", [rel(eng, c) for c in window], "decision", q, a)
        )

    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return records


def hash_seed(*parts):
    # stable small-int mixing for per-file seeds
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p) + 1) % (2**31 - 1)
    return h


def write_manifest(path, records):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    os.replace(tmp, path)


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [QARecord.from_json(line) for line in fh if line.strip()]


def _class_fractions(records):
    """Per-task answer-letter frequencies for closed tasks."""
    out = {}
    for task in ("perception", "reasoning"):
        letters = [r.answer.strip('"') for r in records if r.task == task]
        if letters:
            total = len(letters)
            out[task] = {c: letters.count(c) / total for c in sorted(set(letters))}
    return out


def split_records(records, train_fraction, seed, tolerance=0.05, attempts=200):
    """Engine-disjoint split with closed-task label balance within tolerance."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    engines = sorted({r.engine_id for r in records})
    n_train = round(train_fraction * len(engines))
    if n_train < 1 or n_train >= len(engines):
        raise ValueError(f"too few engines ({len(engines)}) to split at {train_fraction}")
    global_frac = _class_fractions(records)
    rng = np.random.default_rng(seed)
    order = list(engines)
    for _ in range(attempts):
        rng.shuffle(order)
        train_set = set(order[:n_train])
        train = [r for r in records if r.engine_id in train_set]
        test = [r for r in records if r.engine_id not in train_set]
        ok = True
        for part in (train, test):
            frac = _class_fractions(part)
            for task, classes in global_frac.items():
                for letter, f in classes.items():
                    if abs(frac.get(task, {}).get(letter, 0.0) - f) > tolerance:
                        ok = False
        if ok:
            return train, test
    raise ValueError(
        f"could not find an engine split within {tolerance:.0%} label tolerance "
        f"in {attempts} attempts"
    )
