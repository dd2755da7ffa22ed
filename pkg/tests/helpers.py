"""Shared builders for tests: canonical worlds and attack prefixes."""

from __future__ import annotations

import random

from shadowrange import scenario as sc
from shadowrange.attackchain import Campaign, ImplantKind, StagePayload
from shadowrange.defense import TOGGLES
from shadowrange.world import Activity, World


def make_world(*, seed: int | None = None, defenses: tuple[str, ...] = (), name: str = "canonical", **overrides):
    s = sc.canonical(name).with_defenses(**{t: t in defenses for t in TOGGLES})
    for key, value in overrides.items():
        setattr(s, key, value)
    world, campaign = sc.build_world(s, seed)
    return world, campaign


def own_firewall(c: Campaign, fw: str = "fw", version: str = "asa804") -> None:
    """Drive the firewall chain up to a running BANAGLEE."""
    c.extrabacon(fw, ["public", "s3cr3t"])
    assert c.validate_target(fw).validated
    assert c.epicbanana(fw, target_version=version).success
    c.banalride_handshake(fw)
    c.deploy_banaglee(fw)


def payload(target: str, index: int) -> StagePayload:
    return StagePayload(index, f"stage{index}-payload-for-{target}".encode() * 4)


def own_workstation(c: Campaign, target: str = "ws1", pivot: str = "fw") -> None:
    """Staged delivery up to Implanted on a workstation reached through ``pivot``."""
    c.lateral_move(pivot, target, payload(target, 1))
    assert c.validate_target(target).validated
    c.report_stage(target, 1, True)
    c.next_stage(target, payload(target, 2))
    c.run_loader(target)
    c.report_stage(target, 2, True)
    c.next_stage(target, payload(target, 3))
    c.run_dropper(target)
    c.report_stage(target, 3, True)


def compromised(kind: ImplantKind = ImplantKind.GRAYFISH, **kw) -> tuple[World, Campaign]:
    world, c = make_world(**kw)
    own_firewall(c)
    own_workstation(c)
    c.deploy_platform("ws1", kind)
    return world, c


def random_scenario(rng: random.Random) -> sc.Scenario:
    """A canonical variant: random seed, defense subset, failures and goal knobs."""
    s = sc.canonical()
    flags = {t: rng.random() < 0.3 for t in TOGGLES}
    flags["kernel_audit"] = rng.random() < 0.2
    s = s.with_defenses(**flags)
    s.seed = rng.getrandbits(32)
    s.threshold = rng.choice([1, 3, 5, 9])
    s.hardening = tuple(h for h in ("bounds", "canary", "aslr") if rng.random() < 0.5)
    s.scan_interval = rng.choice([5, 10, 25])
    s.salted_kdf = rng.random() < 0.3
    if rng.random() < 0.5:
        s.failures = {"ws1": rng.randint(1, 4)}
    goals = []
    for g in s.goals:
        g = sc.Goal(g.verb, g.target, dict(g.params), g.line)
        if g.verb == "platform":
            g.params["kind"] = rng.choice(["GrayFish", "EquationDrug"])
            g.params["delay"] = str(rng.choice([0, 5, 40]))
            g.params["flasher"] = rng.choice(["yes", "no"])
        if g.verb == "carry":
            g.params["to"] = rng.choice(["ws1", "ws2"])
        if rng.random() < 0.85:
            goals.append(g)
    s.goals = goals
    if rng.random() < 0.3:
        s.activities = [
            Activity(rng.randint(1, 150), rng.choice(["reboot", "vendor_update", "os_update", "reimage"]), rng.choice(["fw", "ws1", "ag1"]))
        ]
    return s
