"""Regenerates the fixture files in this directory. Output is deterministic."""
import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))
LETTERS = "ABCD"

TASKS = [
    ("abnormality detection", "pulmonary", ["consolidation", "lobar", "air bronchograms", "opacity"]),
    ("differential diagnosis", "cardiac", ["cardiomegaly", "vascular congestion", "heart failure", "silhouette"]),
    ("presence assessment", "pleural", ["effusion", "costophrenic angle", "meniscus", "blunting"]),
    ("location assessment", "skeletal", ["rib fracture", "cortical", "posterior arc", "callus"]),
    ("negation assessment", "devices", ["catheter", "tube tip", "carina", "line position"]),
]

OPTION_SETS = [
    ["Pneumothorax", "Congestive heart failure", "Pleural effusion", "Lobar pneumonia"],
    ["Right lower lobe", "Left upper lobe", "Right middle lobe", "Left lower lobe"],
    ["Present", "Absent", "Indeterminate", "Resolved"],
    ["Mild", "Moderate", "Severe", "Not applicable"],
]


def record(id_, question, options, gold, explanation, task, category, images=()):
    return {
        "id": id_,
        "question": question,
        "options": {l: t for l, t in zip(LETTERS, options)},
        "answer": gold,
        "explanation": explanation,
        "task": task,
        "category": category,
        "images": [{"path": p, "kind": "png"} for p in images],
    }


def synthetic(i):
    task, category, vocab = TASKS[i % 5]
    options = OPTION_SETS[i % 4]
    gold = LETTERS[i % 4]
    a, b = vocab[i % 4], vocab[(i + 1) % 4]
    question = f"Synthetic case {i:03d}: the film shows {a} with {b}. Which option fits best?"
    explanation = f"The {a} and {b} seen on the radiograph support {options[LETTERS.index(gold)].lower()}."
    return record(f"syn-{i:03d}", question, options, gold, explanation, task, category)


def reference(i):
    task, category, vocab = TASKS[i % 5]
    options = OPTION_SETS[(i + 1) % 4]
    gold = LETTERS[(i + 2) % 4]
    a, b = vocab[(i + 2) % 4], vocab[(i + 3) % 4]
    question = f"Reference case {i:03d}: radiograph with {a} and {b}. Which option fits best?"
    explanation = f"Findings of {a} with {b} indicate {options[LETTERS.index(gold)].lower()}."
    return record(f"ref-{i:03d}", question, options, gold, explanation, task, category)


def mini(i):
    task, category, vocab = TASKS[i % 5]
    options = OPTION_SETS[i % 4]
    gold = LETTERS[(i * 3) % 4]
    question = f"Mini case {i:02d}: is there evidence of {vocab[i % 4]} on this chest X-ray?"
    explanation = f"The image shows {vocab[(i + 1) % 4]}."
    return record(f"mini-{i:02d}", question, options, gold, explanation, task, category, [f"images/mini-{i:02d}.png"])


def write_jsonl(name, records):
    with open(os.path.join(HERE, name), "w") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def other(letter, step=1):
    return LETTERS[(LETTERS.index(letter) + step) % 4]


def answer(letter, options, note):
    return f"ANSWER: {letter}\nEXPLANATION: {note} points to {options[LETTERS.index(letter)].lower()}."


def ablation_script(cases):
    """Scripted outcomes by case index:
    0-21  reasoning correct in every mode, confidence 0.9
    22-26 correct only when retrieved context is in the prompt, confidence 0.9
    27-37 wrong, confidence 0.3, revision correct
    38-43 wrong, confidence 0.5, revision wrong
    44-49 wrong, confidence 0.8 (accepted)
    """
    rules = []
    for i, c in enumerate(cases):
        key = f"Synthetic case {i:03d}:"
        gold, opts = c["answer"], list(c["options"].values())
        note = c["explanation"].rstrip(".")
        wrong = other(gold)
        if i < 22:
            rules.append({"role": "reasoning", "regex": key, "reply": answer(gold, opts, note)})
        elif i < 27:
            rules.append({"role": "reasoning", "regex": f"(?s)PREDICTED TASK:.*{key}", "reply": answer(gold, opts, note)})
            rules.append({"role": "reasoning", "regex": key, "reply": answer(wrong, opts, "Uncertain appearance")})
        else:
            rules.append({"role": "reasoning", "regex": key, "reply": answer(wrong, opts, "Uncertain appearance")})
        conf = 0.9 if i < 27 else 0.3 if i < 38 else 0.5 if i < 44 else 0.8
        rules.append({"role": "confidence", "regex": key, "reply": f"Assessment complete.\n{conf}"})
        if 27 <= i < 38:
            rules.append({"role": "revision", "regex": key, "reply": answer(gold, opts, note)})
        elif 38 <= i < 44:
            rules.append({"role": "revision", "regex": key, "reply": answer(other(gold, 2), opts, "On review")})
    rules.append({"role": "rerank", "regex": r"(?m)^CANDIDATE ID: ref-\d*[02468]$", "reply": "SCORE: 80"})
    rules.append({"role": "rerank", "regex": r"(?m)^CANDIDATE ID: ref-", "reply": "Relevant.\nSCORE: 45"})
    return {"rules": rules}


def matrix(ids):
    models = ["model-a", "model-b", "model-c", "model-d", "model-e"]
    results = {}
    for n, id_ in enumerate(ids):
        results[id_] = {m: ((n * 7 + j * 3) % 5) < (4 - j % 3) for j, m in enumerate(models)}
    return {"models": models, "results": results}


def main():
    cases = [synthetic(i) for i in range(50)]
    write_jsonl("synthetic50.jsonl", cases)
    write_jsonl("rag_bank.jsonl", [reference(i) for i in range(40)])
    minis = [mini(i) for i in range(1, 13)]
    write_jsonl("mini12.jsonl", minis)
    with open(os.path.join(HERE, "ablation_script.json"), "w") as f:
        json.dump(ablation_script(cases), f, indent=1)
        f.write("\n")
    with open(os.path.join(HERE, "mini12_matrix.json"), "w") as f:
        json.dump(matrix([m["id"] for m in minis]), f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
