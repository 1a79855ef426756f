import ast
import logging

import regex

from .prompts import render_prompt

logger = logging.getLogger(__name__)

BRACKETED = regex.compile(r'\[[^\[\]]*\]', regex.DOTALL)
LIST_MARKER = regex.compile(r'^\s*(?:[-*•]|\d+[.)])\s*')
ANSWER_PREFIX = regex.compile(r'^\s*(?:final\s+)?answers?\s*:\s*', regex.IGNORECASE)
AND_SPLIT = regex.compile(r'\s*,\s*(?:and\s+)?|\s+and\s+', regex.IGNORECASE)


def linearize(evidence, question_entities):
    """
    Depth-first chains over the evidence graph, one DFS per question entity
    present in it. Each root owns an edge-visited set; triples that no root
    reaches come out as singleton chains.
    """
    g = evidence.graph if hasattr(evidence, 'graph') else evidence
    chains = []
    covered = set()

    for root in sorted(e for e in set(question_entities) if e in g.entities):
        used = set()

        def walk(node, path, on_path):
            extended = False
            for t in g.adjacency[node]:
                if t in used:
                    continue
                nxt = t.tail if t.head == node else t.head
                if nxt in on_path and nxt != node:
                    continue
                used.add(t)
                extended = True
                walk(nxt, path + [t], on_path | {nxt})
            if not extended and path:
                chains.append(list(path))
                covered.update(path)

        walk(root, [], {root})

    for t in g.sorted_triples():
        if t not in covered:
            chains.append([t])
    return chains


def verbalize_chain(chain, g, root=None):
    """'head → relation → tail → relation → tail', following the walk direction."""
    if not chain:
        return ''
    first = chain[0]
    node = root if root in (first.head, first.tail) else first.head
    parts = [g.entities[node]]
    for t in chain:
        nxt = t.tail if t.head == node else t.head
        parts.extend([g.relations[t.relation], g.entities[nxt]])
        node = nxt
    return ' → '.join(parts)


def verbalize_chains(chains, g, question_entities=()):
    roots = set(question_entities)
    texts = []
    for chain in chains:
        start = next((e for e in (chain[0].head, chain[0].tail) if e in roots), None) if chain else None
        texts.append(verbalize_chain(chain, g, start))
    return texts


def _clean(item):
    return item.strip().strip('"\'').strip().rstrip('.').strip()


def parse_answers(raw):
    """
    Answer list from a generator completion: a bracketed list first, then a
    single line of comma/"and" separated prose, then one answer per line.
    """
    text = (raw or '').strip()
    if not text:
        return []

    match = BRACKETED.search(text)
    if match:
        try:
            value = ast.literal_eval(match.group(0))
        except (ValueError, SyntaxError):
            value = [part for part in match.group(0)[1:-1].split(',')]
        if isinstance(value, (list, tuple)):
            items = [_clean(str(v)) for v in value]
            items = [i for i in items if i]
            if items:
                return list(dict.fromkeys(items))

    lines = [ANSWER_PREFIX.sub('', LIST_MARKER.sub('', line)) for line in text.splitlines() if line.strip()]
    if len(lines) == 1:
        items = [_clean(part) for part in AND_SPLIT.split(lines[0])]
        items = [i for i in items if i]
        if items:
            return list(dict.fromkeys(items))
    elif lines:
        items = [_clean(line) for line in lines]
        items = [i for i in items if i]
        if items:
            return list(dict.fromkeys(items))

    logger.warning(f"Could not parse answer list from completion {text[:80]!r}")
    return [text]


def generate_answer(client, question, chains, g=None, question_entities=(), examples=()):
    """Answer list for a question from its reasoning chains, sampled at temperature 0."""
    if chains and g is not None and not isinstance(chains[0], str):
        texts = verbalize_chains(chains, g, question_entities)
    else:
        texts = list(chains)
    prompt = render_prompt('generate', examples=examples, chains=texts, Question=question)
    raw = client.complete_one(prompt, temperature=0.0)
    return parse_answers(raw)


def answer_record(question_id, answers, chains):
    return {'question_id': question_id, 'answers': list(answers), 'chains_used': len(chains)}
