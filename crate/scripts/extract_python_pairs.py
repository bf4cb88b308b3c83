#!/usr/bin/env python3
"""Extract docstring/function pairs from a Python source tree as JSONL.

Produces records in the corpus format read by `codesearch-core` (`id`, `language`,
`doc_tokens`, `code_tokens`). The docstring summary is the first paragraph,
whitespace-split; code tokens come from the stdlib `tokenize` module with the
docstring itself removed, as in the upstream corpus preprocessing.

Files are assigned to train/test by a stable hash of their relative path, so
no module contributes functions to both partitions.

    python3 scripts/extract_python_pairs.py out_dir \
        cpython=/usr/lib/python3.10 \
        numpy=/usr/local/lib/python3.10/dist-packages/numpy \
        networkx=/usr/local/lib/python3.10/dist-packages/networkx \
        --train 5000 --test 1000
"""
import argparse
import ast
import hashlib
import io
import json
import os
import sys
import tokenize

SKIP_DIRS = {"test", "tests", "idlelib", "lib2to3", "site-packages", "dist-packages", "__pycache__"}
MAX_DOC = 64
MAX_CODE = 256


def doc_summary(doc):
    para = []
    for line in doc.strip().splitlines():
        if not line.strip():
            break
        para.append(line.strip())
    return " ".join(para).split()


def code_tokens(src, docstring_node):
    skip_start = (docstring_node.lineno, docstring_node.col_offset)
    skip_end = (docstring_node.end_lineno, docstring_node.end_col_offset)
    out = []
    try:
        for tok in tokenize.generate_tokens(io.StringIO(src).readline):
            if tok.type in (tokenize.COMMENT, tokenize.NL, tokenize.NEWLINE,
                            tokenize.INDENT, tokenize.DEDENT, tokenize.ENDMARKER):
                continue
            if skip_start <= tok.start and tok.end <= skip_end:
                continue
            out.append(tok.string)
    except (tokenize.TokenError, IndentationError, SyntaxError):
        return None
    return out


def functions(path, label, rel):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        tree = ast.parse(text)
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    lines = text.splitlines(keepends=True)

    def walk(node, prefix):
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef)):
                name = prefix + child.name
                yield name, child
                yield from walk(child, name + ".")
            elif isinstance(child, ast.ClassDef):
                yield from walk(child, prefix + child.name + ".")

    for qualname, fn in walk(tree, ""):
        doc = ast.get_docstring(fn, clean=True)
        if not doc or not fn.body:
            continue
        first = fn.body[0]
        start = fn.lineno - 1
        if fn.decorator_list:
            start = fn.decorator_list[0].lineno - 1
        src_lines = lines[start:fn.end_lineno]
        indent = len(src_lines[0]) - len(src_lines[0].lstrip())
        dedented = "".join(l[indent:] if len(l) >= indent else l for l in src_lines)
        # Shift the docstring span into dedented coordinates.
        shifted = ast.Constant(value=None)
        shifted.lineno = first.lineno - start
        shifted.col_offset = first.col_offset - indent
        shifted.end_lineno = first.end_lineno - start
        shifted.end_col_offset = first.end_col_offset - indent
        toks = code_tokens(dedented, shifted)
        summary = doc_summary(doc)
        if toks is None or len(summary) < 3 or len(toks) < 10:
            continue
        yield {
            "id": f"{label}/{rel}:{qualname}:{fn.lineno}",
            "language": "python",
            "doc_tokens": summary[:MAX_DOC],
            "code_tokens": toks[:MAX_CODE],
        }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("roots", nargs="+", help="label=path")
    ap.add_argument("--train", type=int, default=5000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    args = ap.parse_args()

    files = []
    for spec in args.roots:
        label, root = spec.split("=", 1)
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames[:] = sorted(d for d in dirnames if d not in SKIP_DIRS)
            for f in sorted(filenames):
                if f.endswith(".py"):
                    full = os.path.join(dirpath, f)
                    files.append((label, os.path.relpath(full, root), full))
    files.sort()

    train, test, seen_docs = [], [], set()
    for label, rel, full in files:
        key = f"{label}/{rel}"
        bucket = int(hashlib.sha256(key.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
        target = test if bucket < args.test_fraction else train
        for rec in functions(full, label, rel):
            doc_key = " ".join(rec["doc_tokens"])
            if doc_key in seen_docs:
                continue
            seen_docs.add(doc_key)
            target.append(rec)

    if len(train) < args.train or len(test) < args.test:
        sys.exit(f"not enough pairs: train={len(train)} test={len(test)}")
    os.makedirs(args.out_dir, exist_ok=True)
    for name, recs, n in (("train", train, args.train), ("test", test, args.test)):
        with open(os.path.join(args.out_dir, f"python_{name}.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
            for rec in recs[:n]:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"available train={len(train)} test={len(test)}; wrote {args.train}/{args.test}")


if __name__ == "__main__":
    main()
