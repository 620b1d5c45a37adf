"""Unified diff parsing and strict application."""

import pytest

from skillet.errors import HunkMismatch
from skillet.patching import (
    PatchFormatError,
    apply_hunks,
    apply_patch_text,
    count_changed_lines,
    is_creation_patch,
    is_pure_addition,
    parse_unified_diff,
)

SIMPLE = """--- a/calc.py
+++ b/calc.py
@@ -1,2 +1,2 @@
 def add(a, b):
-    return a - b
+    return a + b
"""

MULTI = """@@ -1,3 +1,3 @@
 line1
-line2
+line2x
 line3
@@ -6,2 +6,3 @@
 line6
+line6b
 line7
"""

CREATE = """@@ -0,0 +1,2 @@
+first
+second
"""

APPEND_ONLY = """@@ -3,0 +4,2 @@
+tail one
+tail two
"""


class TestParse:
    def test_headers_skipped_and_counts_read(self):
        hunks = parse_unified_diff(SIMPLE)
        assert len(hunks) == 1
        assert (hunks[0].old_start, hunks[0].old_count) == (1, 2)

    def test_no_hunk_header(self):
        with pytest.raises(PatchFormatError, match="@@"):
            parse_unified_diff("just some text\nwith no markers\n")

    def test_count_mismatch_rejected(self):
        with pytest.raises(PatchFormatError, match="counts"):
            parse_unified_diff("@@ -1,5 +1,1 @@\n-one line\n+new\n")

    def test_unexpected_line_tag(self):
        with pytest.raises(PatchFormatError, match="unexpected"):
            parse_unified_diff("@@ -1,1 +1,1 @@\n*what\n")

    def test_changed_line_count(self):
        assert count_changed_lines(parse_unified_diff(MULTI)) == 3

    def test_predicates(self):
        assert is_pure_addition(parse_unified_diff(APPEND_ONLY))
        assert not is_pure_addition(parse_unified_diff(SIMPLE))
        assert is_creation_patch(parse_unified_diff(CREATE))
        assert not is_creation_patch(parse_unified_diff(SIMPLE))

    def test_no_newline_marker_tolerated(self):
        hunks = parse_unified_diff(
            "@@ -1,1 +1,1 @@\n-old\n\\ No newline at end of file\n+new\n"
        )
        assert hunks[0].old_lines() == ["old"]
        assert hunks[0].new_lines() == ["new"]


class TestApply:
    def test_single_hunk(self):
        out = apply_patch_text("def add(a, b):\n    return a - b\n", SIMPLE)
        assert out == "def add(a, b):\n    return a + b\n"

    def test_multi_hunk_with_gap(self):
        original = "\n".join(f"line{i}" for i in range(1, 8)) + "\n"
        out = apply_patch_text(original, MULTI)
        assert "line2x" in out
        assert "line6b" in out
        assert out.splitlines()[4] == "line5"

    def test_context_mismatch_is_all_or_nothing(self):
        original = "completely different\ncontent here\n"
        with pytest.raises(HunkMismatch, match="context mismatch"):
            apply_patch_text(original, SIMPLE)

    def test_creation_from_empty(self):
        assert apply_patch_text("", CREATE) == "first\nsecond\n"

    def test_insertion_with_zero_old_count(self):
        original = "a\nb\nc\n"
        body = "@@ -1,0 +2,1 @@\n+inserted\n"
        assert apply_patch_text(original, body) == "a\ninserted\nb\nc\n"

    def test_overlapping_hunks_rejected(self):
        body = "@@ -1,1 +1,1 @@\n-a\n+x\n@@ -1,1 +2,1 @@\n-a\n+y\n"
        with pytest.raises(HunkMismatch, match="overlaps"):
            apply_hunks(["a", "b"], parse_unified_diff(body))

    def test_hunk_past_end_of_file(self):
        body = "@@ -10,1 +10,1 @@\n-x\n+y\n"
        with pytest.raises(HunkMismatch):
            apply_hunks(["only"], parse_unified_diff(body))

    def test_blank_context_lines(self):
        original = "a\n\nb\n"
        body = "@@ -1,3 +1,3 @@\n a\n\n-b\n+c\n"
        assert apply_patch_text(original, body) == "a\n\nc\n"
