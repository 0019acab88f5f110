#!/usr/bin/env python3
"""Refresh the bundled reference data from upstream sources.

Public suffix list: the snapshot keeps only the top-level domains already in
the bundled subset (pass --all-suffixes for the full list).

Trackers: the Exodus tracker API lists code signatures as regular
expressions; only signatures that reduce to a plain package prefix are kept,
and trackers with none are dropped. Company names are carried over from the
existing snapshot.
"""

import argparse
import datetime
import json
import os
import re
import sys

import requests

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(ROOT, "crates", "core", "data")
PSL_URL = "https://publicsuffix.org/list/public_suffix_list.dat"
EXODUS_URL = "https://reports.exodus-privacy.eu.org/api/trackers"

PSL_HEADER = """// Public suffix list snapshot (subset) for registrable-domain derivation.
// Format and matching rules follow https://publicsuffix.org/list/
// Refresh with scripts/refresh_data.py.
"""

PREFIX = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")


def psl_sections(text):
    """Yields (section, rule) pairs; section is "ICANN" or "PRIVATE"."""
    section = None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("// ===BEGIN "):
            section = line[len("// ===BEGIN "):].split()[0]
        elif line.startswith("// ===END "):
            section = None
        elif line and not line.startswith("//") and section:
            yield section, line.split()[0]


def refresh_psl(all_suffixes):
    path = os.path.join(DATA, "public_suffix_list.dat")
    with open(path, encoding="utf-8") as f:
        current = f.read()
    keep_tlds = {rule.lstrip("*.!").rsplit(".", 1)[-1] for _, rule in psl_sections(current)}
    upstream = requests.get(PSL_URL, timeout=30)
    upstream.raise_for_status()
    rules = {"ICANN": [], "PRIVATE": []}
    for section, rule in psl_sections(upstream.text):
        tld = rule.lstrip("*.!").rsplit(".", 1)[-1]
        if all_suffixes or tld in keep_tlds:
            rules[section].append(rule)
    out = [PSL_HEADER]
    for section in ("ICANN", "PRIVATE"):
        out.append("// ===BEGIN %s DOMAINS===" % section)
        out.extend(rules[section])
        out.append("// ===END %s DOMAINS===\n" % section)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out))
    print("public suffix list: %d ICANN, %d private rules" % (len(rules["ICANN"]), len(rules["PRIVATE"])))


def signature_prefixes(signature):
    out = []
    for alt in signature.split("|"):
        alt = alt.replace("\\.", ".").strip().rstrip(".")
        if PREFIX.match(alt):
            out.append(alt)
    return sorted(set(out))


def refresh_trackers():
    path = os.path.join(DATA, "trackers.json")
    # the upstream list has no company field; keep the curated one
    with open(path, encoding="utf-8") as f:
        companies = {t["tracker_id"]: t["company"] for t in json.load(f)["trackers"]}
    resp = requests.get(EXODUS_URL, timeout=30)
    resp.raise_for_status()
    trackers = []
    for tid, t in sorted(resp.json()["trackers"].items(), key=lambda kv: int(kv[0])):
        prefixes = signature_prefixes(t.get("code_signature") or "")
        if not prefixes:
            continue
        domains = [d.strip().lstrip(".") for d in (t.get("network_signature") or "").replace("\\.", ".").split("|")]
        trackers.append({
            "tracker_id": str(tid),
            "name": t["name"],
            "company": companies.get(str(tid), t["name"]),
            "categories": t.get("categories", []),
            "code_signature_prefixes": prefixes,
            "network_signature_domains": sorted({d for d in domains if PREFIX.match(d.replace("-", "_"))}),
        })
    doc = {
        "schema_version": "1.0",
        "version": datetime.date.today().strftime("%Y-%m-exodus"),
        "source": "Exodus Privacy tracker list (code signatures normalized to package prefixes)",
        "trackers": trackers,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, ensure_ascii=False)
        f.write("\n")
    print("trackers: %d entries" % len(trackers))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--psl", action="store_true", help="refresh the public suffix list only")
    ap.add_argument("--trackers", action="store_true", help="refresh the tracker database only")
    ap.add_argument("--all-suffixes", action="store_true", help="keep every public suffix rule")
    args = ap.parse_args()
    both = not (args.psl or args.trackers)
    try:
        if args.psl or both:
            refresh_psl(args.all_suffixes)
        if args.trackers or both:
            refresh_trackers()
    except requests.RequestException as e:
        sys.exit("refresh failed: %s" % e)


if __name__ == "__main__":
    main()
