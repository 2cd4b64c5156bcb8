"""Regenerate the packaged template geometries (requires RDKit).

Usage: python3 scripts/make_templates.py crates/core/data/templates
"""
import sys
from pathlib import Path

from rdkit import Chem
from rdkit.Chem import AllChem

TEMPLATES = [
    # name, smiles, class, capping
    ("gly", "NCC(=O)O", "aminoacid", "uncapped"),
    ("ala", "NC(C)C(=O)O", "aminoacid", "uncapped"),
    ("ser", "NC(CO)C(=O)O", "aminoacid", "uncapped"),
    ("cys", "NC(CS)C(=O)O", "aminoacid", "uncapped"),
    ("asp", "NC(CC(=O)O)C(=O)O", "aminoacid", "uncapped"),
    ("asn", "NC(CC(N)=O)C(=O)O", "aminoacid", "uncapped"),
    ("thr", "NC(C(C)O)C(=O)O", "aminoacid", "uncapped"),
    ("pro", "OC(=O)C1CCCN1", "aminoacid", "uncapped"),
    ("val", "NC(C(C)C)C(=O)O", "aminoacid", "uncapped"),
    ("leu", "NC(CC(C)C)C(=O)O", "aminoacid", "uncapped"),
    ("gly-gly", "NCC(=O)NCC(=O)O", "dipeptide", "uncapped"),
    ("ala-ala", "NC(C)C(=O)NC(C)C(=O)O", "dipeptide", "uncapped"),
    ("ace-gly-gly-nme", "CC(=O)NCC(=O)NCC(=O)NC", "dipeptide", "capped"),
    ("ace-ala-gly-nme", "CC(=O)NC(C)C(=O)NCC(=O)NC", "dipeptide", "capped"),
]


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, smiles, cls, cap in TEMPLATES:
        mol = Chem.AddHs(Chem.MolFromSmiles(smiles))
        AllChem.EmbedMolecule(mol, randomSeed=2024)
        AllChem.MMFFOptimizeMolecule(mol, maxIters=2000)
        conf = mol.GetConformer()
        bonds = sorted(
            tuple(sorted((b.GetBeginAtomIdx(), b.GetEndAtomIdx()))) for b in mol.GetBonds()
        )
        eligible = [
            a.GetIdx()
            for a in mol.GetAtoms()
            if a.GetSymbol() == "H" and a.GetNeighbors()[0].GetSymbol() in ("C", "N", "O")
        ]
        lines = [str(mol.GetNumAtoms())]
        lines.append(
            " ".join(
                [
                    "charge=0",
                    "multiplicity=1",
                    f"name={name}",
                    f"class={cls}",
                    f"capping={cap}",
                    "bonds=" + ";".join(f"{i}-{j}" for i, j in bonds),
                    "eligible_h=" + ",".join(map(str, eligible)),
                ]
            )
        )
        for a in mol.GetAtoms():
            p = conf.GetAtomPosition(a.GetIdx())
            lines.append(f"{a.GetSymbol():<2} {p.x:14.8f} {p.y:14.8f} {p.z:14.8f}")
        (out / f"{name}.xyz").write_text("\n".join(lines) + "\n")
        print(name, mol.GetNumAtoms())


if __name__ == "__main__":
    main(Path(sys.argv[1]))
