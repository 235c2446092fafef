#!/usr/bin/env python3
"""End-to-end checks for the safe CLI: pinned values, exit codes, idempotency and JSON schemas."""

import argparse
import filecmp
import json
import pathlib
import shutil
import subprocess
import sys

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

SMALL = ["--classes", "4", "--pool-per-class", "10", "--test-per-class", "10", "--height", "5", "--width", "5",
         "--channels", "16", "--out-dim", "8", "--parts", "6", "--heads", "2", "--seed", "11"]
TRAIN = ["--shots", "2", "--seeds", "1,2", "--iterations", "60", "--eval-every", "20", "--batch-size", "4"]

failures = []


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


class Harness:
    def __init__(self, safe, schema_dir, work):
        self.safe = safe
        self.work = work
        registry = Registry()
        self.schemas = {}
        for p in sorted(schema_dir.glob("*.schema.json")):
            doc = json.loads(p.read_text())
            registry = registry.with_resource(p.name, Resource.from_contents(doc))
            self.schemas[p.name] = doc
        self.registry = registry

    def run(self, *args, expect=0):
        proc = subprocess.run([str(self.safe), *map(str, args)], capture_output=True, text=True)
        if proc.returncode != expect:
            print(proc.stdout, proc.stderr, sep="\n")
        return proc

    def ok(self, *args):
        proc = self.run(*args)
        check(proc.returncode == 0, "exit 0: safe " + " ".join(map(str, args[:1])))
        return proc

    def fresh(self, name):
        d = self.work / name
        shutil.rmtree(d, ignore_errors=True)
        return d

    def schema_for(self, doc):
        fmt = doc.get("format")
        if fmt == "safe-manifest":
            return "manifest.schema.json"
        if fmt == "safe-attnpool":
            return "attnpool.schema.json"
        if fmt == "safe-cache":
            return "cache_store.schema.json"
        cmd = doc.get("command")
        if cmd in ("train", "grid"):
            return "train.schema.json"
        return {"gen-synth": "gen_synth.schema.json", "eval": "eval.schema.json", "cache": "cache.schema.json",
                "correspond": "correspond.schema.json", "report": "report.schema.json"}.get(cmd)

    def validate_tree(self, root):
        count = 0
        for p in sorted(root.rglob("*.json")):
            doc = json.loads(p.read_text())
            name = self.schema_for(doc)
            if name is None:
                check(False, f"no schema for {p}")
                continue
            v = Draft202012Validator(self.schemas[name], registry=self.registry)
            errs = [e.message for e in v.iter_errors(doc)]
            check(not errs, f"{p.relative_to(self.work)} validates against {name}" + (f": {errs[:3]}" if errs else ""))
            count += 1
        return count


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--safe", required=True, type=pathlib.Path)
    ap.add_argument("--schema-dir", required=True, type=pathlib.Path)
    ap.add_argument("--work-dir", required=True, type=pathlib.Path)
    a = ap.parse_args()
    a.work_dir.mkdir(parents=True, exist_ok=True)
    h = Harness(a.safe.resolve(), a.schema_dir.resolve(), a.work_dir.resolve())

    # generation and the pinned zero-shot value
    data = h.fresh("data")
    h.ok("gen-synth", "--out", data, *SMALL)
    manifest = data / "manifest.json"
    pinned = json.loads(manifest.read_text())["metadata"]["synthetic"]["zero_shot_accuracy"]
    zs = h.fresh("zs")
    h.ok("eval", "--manifest", manifest, "--out", zs, "--zero-shot", "--split", "test")
    zs_acc = json.loads((zs / "eval.json").read_text())["accuracy"]
    check(zs_acc == pinned, f"zero-shot test accuracy {zs_acc} equals pinned {pinned}")

    # zero iterations keeps the initial layer
    t0 = h.fresh("train0")
    h.ok("train", "--manifest", manifest, "--out", t0, *TRAIN[:4], "--iterations", "0")
    init_dir = data / json.loads(manifest.read_text())["attnpool_checkpoint"]
    for fold in json.loads((t0 / "train.json").read_text())["folds"]:
        ckpt = t0 / fold["checkpoint"]
        fields = json.loads((init_dir / "attnpool.json").read_text())["fields"]
        identical = all(filecmp.cmp(init_dir / f, ckpt / f, shallow=False) for f in fields.values())
        check(identical, f"seed {fold['seed']}: zero-iteration checkpoint is byte-identical to init")
        check(fold["test_accuracy"] == fold["zero_shot_test_accuracy"],
              f"seed {fold['seed']}: zero-iteration test accuracy equals zero-shot")
    blend0 = h.fresh("blend0")
    h.ok("eval", "--manifest", manifest, "--out", blend0, "--checkpoint", t0 / "fold_1" / "attnpool_f")
    check(json.loads((blend0 / "eval.json").read_text())["accuracy"] == zs_acc,
          "blending the init checkpoint reproduces zero-shot accuracy")

    # full pipeline twice into fresh directories
    runs = []
    for tag in ("a", "b"):
        run = h.fresh(f"run_{tag}")
        h.ok("train", "--manifest", manifest, "--out", run, *TRAIN)
        h.ok("cache", "--manifest", manifest, "--out", run, "--train-dir", run, "--shots", "2", "--seeds", "1,2")
        h.ok("report", "--from", run)
        grid = run / "grid"
        h.ok("grid", "--manifest", manifest, "--out", grid, *TRAIN, "--lr-grid", "1e-3,1e-4", "--wd-grid", "0,1e-3",
             "--jobs", "2")
        ev = run / "eval"
        h.ok("eval", "--manifest", manifest, "--out", ev, "--checkpoint", run / "fold_1" / "attnpool_f")
        cor = run / "cor"
        src = data / json.loads(manifest.read_text())["samples"][0]["path"]
        h.ok("correspond", "--source", src, "--target", src, "--x", "3", "--y", "1", "--upsample", "10,10",
             "--out", cor)
        c = json.loads((cor / "correspond.json").read_text())
        check(c["target_point"] == c["source_point"] == {"x": 3, "y": 1}, "self-correspondence returns the query point")
        runs.append(run)
    check(same_tree(runs[0], runs[1]), "repeated runs into fresh directories produce identical files")
    data2 = h.fresh("data_again")
    h.ok("gen-synth", "--out", data2, *SMALL)
    check(same_tree(data, data2), "gen-synth is byte-identical across runs")

    # every JSON output matches its schema
    n = h.validate_tree(h.work)
    check(n >= 20, f"validated {n} JSON documents")

    # exit codes
    bad = h.fresh("bad")
    codes = [
        (2, ["train", "--manifest", manifest, "--out", bad, "--batch-size", "0"], "zero batch size"),
        (2, ["train", "--manifest", manifest, "--out", bad, "--no-such-flag"], "unknown flag"),
        (2, ["eval", "--manifest", manifest, "--out", bad, "--beta", "0.5"], "eval without a model choice"),
        (2, ["correspond", "--source", src, "--target", src, "--x", "99", "--y", "0", "--out", bad],
         "point outside the map"),
        (3, ["train", "--manifest", bad / "missing.json", "--out", bad], "missing manifest"),
        (3, ["train", "--manifest", manifest, "--out", bad, "--shots", "50"], "more shots than samples"),
    ]
    corrupt = h.work / "corrupt.saft"
    corrupt.write_bytes(b"NOPE" + bytes(16))
    codes.append((3, ["correspond", "--source", corrupt, "--target", src, "--x", "0", "--y", "0", "--out", bad],
                  "corrupt tensor file"))
    for expect, args, what in codes:
        proc = h.run(*args, expect=expect)
        lines = [l for l in proc.stderr.splitlines() if l.strip()]
        check(proc.returncode == expect, f"exit {expect} on {what} (got {proc.returncode})")
        check(len(lines) >= 1, f"diagnostic printed on {what}")

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
