"""Shared workbook fixtures: the pet-shop sales book (with its borrowed
summary table) and the invoices/animals book (linked tables).

SALES_2009 is the raw data the sales fixture is built from; tests derive
expected aggregates straight from this constant so the engine is always
checked against an independent summation.
"""

from __future__ import annotations

from decimal import Decimal

from mtab import Workbook
from mtab.values import values_equal

# (month, [(sales code, total), ...]) for year 2009, in document order.
SALES_2009 = [
    ("January", [("Goldfish", "9445.04"), ("Rodents", "4497.39")]),
    ("February", [("Goldfish", "530.79"), ("Rodents", "9152.93"),
                  ("Wide mouthed frogs", "3556.43")]),
    ("March", [("Goldfish", "2190.53"), ("Rodents", "4321.37"),
               ("Wide mouthed frogs", "9724.86")]),
    ("April", [("Goldfish", "2155.37"), ("Rodents", "7569.59"),
               ("Wide mouthed frogs", "5523.38")]),
    ("May", [("Goldfish", "988.73"), ("Rodents", "6513.58"),
             ("Goldfish", "1848.78")]),
    ("June", [("Rodents", "6416.97"), ("Goldfish", "9306.08"),
              ("Rodents", "3483.43")]),
    ("July", [("Wide mouthed frogs", "6200.95"), ("Goldfish", "4667.88"),
              ("Rodents", "6964.91")]),
    ("August", [("Goldfish", "446.73"), ("Rodents", "11186.05")]),
]

# Animal price list: (animal, unit price, VAT rate). Back-solved from the
# invoice arithmetic: Goldfish qty 1 -> net 1, vat 0.1  => price 1, 10%;
# Rodents qty 4 -> net 12, vat 1.2                      => price 3, 10%;
# Wide mouthed frog qty 3 -> net 15, vat 3              => price 5, 20%.
ANIMALS = [
    ("Goldfish", "1", "0.1"),
    ("Rodents", "3", "0.1"),
    ("Wide mouthed frog", "5", "0.2"),
]

# (invoice no, customer, [(item, quantity), ...])
INVOICES = [
    ("10001", "Ted Hawkins", [("Goldfish", 1), ("Rodents", 4)]),
    ("10002", "Andrew Lemon", [("Wide mouthed frog", 3), ("Goldfish", 2),
                               ("Rodents", 5)]),
]


def build_sales(with_summary: bool = True) -> Workbook:
    wb = Workbook("petshop")
    wb.add_table("Sales", ["Year", "Month", "Sale"])
    wb.add_field("Sales", "Year", 0, "data")
    wb.add_field("Sales", "Month", 1, "data")
    wb.add_field("Sales", "Sales Code", 2, "data")
    wb.add_field("Sales", "Total", 2, "data", display_format="currency-2dp")
    wb.add_field("Sales", "Monthly Total", 1, "formula",
                 formula="=SUM(Total)", display_format="currency-2dp")
    wb.add_field("Sales", "Yearly Total", 0, "formula",
                 formula="=SUM(Total)", display_format="currency-2dp")
    year = wb.insert_row("Sales")
    wb.set_cell("Sales", year, "Year", Decimal(2009))
    for month, sales in SALES_2009:
        m = wb.insert_row("Sales", year)
        wb.set_cell("Sales", m, "Month", month)
        for code, total in sales:
            s = wb.insert_row("Sales", m)
            wb.set_cell("Sales", s, "Sales Code", code)
            wb.set_cell("Sales", s, "Total", Decimal(total))
    if with_summary:
        wb.add_table("Sales Summary", ["Code", "Year"])
        wb.add_field("Sales Summary", "Sales Code", 0, "borrowed",
                     source=("Sales", "Sales Code"))
        wb.add_field("Sales Summary", "Year", 1, "borrowed",
                     source=("Sales", "Year"))
        wb.add_field("Sales Summary", "Total", 1, "formula",
                     formula="=SUM(Sales!Total)",
                     display_format="currency-2dp")
    wb.recalculate()
    return wb


def build_invoices() -> Workbook:
    wb = Workbook("invoices")
    wb.add_table("Animals", ["Animal"])
    wb.add_field("Animals", "Animal", 0, "data")
    wb.add_field("Animals", "Price", 0, "data")
    wb.add_field("Animals", "VAT", 0, "data")
    for animal, price, vat in ANIMALS:
        r = wb.insert_row("Animals")
        wb.set_cell("Animals", r, "Animal", animal)
        wb.set_cell("Animals", r, "Price", Decimal(price))
        wb.set_cell("Animals", r, "VAT", Decimal(vat))

    wb.add_table("Invoices", ["Invoice", "Line"])
    wb.add_field("Invoices", "Invoice No", 0, "data")
    wb.add_field("Invoices", "Customer", 0, "data")
    wb.add_field("Invoices", "Total", 0, "formula",
                 formula="=SUM([Net + VAT])", display_format="currency-2dp")
    wb.add_field("Invoices", "Item", 1, "data")
    wb.add_field("Invoices", "Quantity", 1, "data")
    wb.add_field("Invoices", "Net", 1, "formula",
                 formula="=Quantity*Animals!Price")
    wb.add_field("Invoices", "VAT", 1, "formula",
                 formula="=Net*Animals!VAT")
    wb.add_field("Invoices", "Net + VAT", 1, "formula",
                 formula="=Net+VAT", display_format="currency-2dp")
    wb.declare_link(("Invoices", "Item"), ("Animals", "Animal"))
    for number, customer, lines in INVOICES:
        inv = wb.insert_row("Invoices")
        wb.set_cell("Invoices", inv, "Invoice No", Decimal(number))
        wb.set_cell("Invoices", inv, "Customer", customer)
        for item, qty in lines:
            line = wb.insert_row("Invoices", inv)
            wb.set_cell("Invoices", line, "Item", item)
            wb.set_cell("Invoices", line, "Quantity", Decimal(qty))
    wb.recalculate()
    return wb


def find_row(wb: Workbook, table: str, level: int, **cells) -> str:
    """The unique row at ``level`` whose ancestor-or-self values match all
    the given field=value pairs."""
    t = wb.table(table)
    hits = []
    for row in t.rows_at_level(level):
        if all(values_equal(t.ancestor_value(row, t.field(name)), value)
               for name, value in cells.items()):
            hits.append(row.id)
    if len(hits) != 1:
        raise AssertionError(
            f"expected exactly one row, found {len(hits)} for {cells}")
    return hits[0]
