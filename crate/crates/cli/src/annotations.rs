//! MoNuSeg-style polygon annotations:
//! `Annotation/Regions/Region/Vertices/Vertex[@X, @Y]`.

use aenet_core::imaging::{AnnotationSet, Polygon};

use crate::error::{CliError, CliResult};

/// Parsed polygons plus one warning per skipped region.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedAnnotations {
    pub set: AnnotationSet,
    pub warnings: Vec<String>,
}

fn line_of(doc: &roxmltree::Document, node: roxmltree::Node) -> u32 {
    doc.text_pos_at(node.range().start).row
}

fn coordinate(doc: &roxmltree::Document, vertex: roxmltree::Node, name: &str) -> CliResult<f64> {
    let line = line_of(doc, vertex);
    let raw = vertex
        .attribute(name)
        .ok_or_else(|| CliError::Data(format!("line {line}: vertex without {name} attribute")))?;
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Data(format!("line {line}: {name}=\"{raw}\" is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::Data(format!("line {line}: {name} is not finite")));
    }
    Ok(v)
}

pub fn parse_annotations(xml: &str) -> CliResult<ParsedAnnotations> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| {
        let pos = e.pos();
        CliError::Data(format!(
            "malformed XML at line {}, column {}: {e}",
            pos.row, pos.col
        ))
    })?;
    let mut out = ParsedAnnotations::default();
    let regions = doc
        .descendants()
        .filter(|n| n.has_tag_name("Region"))
        .filter(|n| n.ancestors().any(|a| a.has_tag_name("Regions")));
    for region in regions {
        let mut polygon: Polygon = Vec::new();
        for vertices in region.children().filter(|n| n.has_tag_name("Vertices")) {
            for v in vertices.children().filter(|n| n.has_tag_name("Vertex")) {
                polygon.push((coordinate(&doc, v, "X")?, coordinate(&doc, v, "Y")?));
            }
        }
        if polygon.len() < 3 {
            let id = region.attribute("Id").unwrap_or("?");
            let msg = format!(
                "line {}: region {id} has {} vertices, skipped",
                line_of(&doc, region),
                polygon.len()
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        out.set.polygons.push(polygon);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_nested_regions_and_ignores_other_elements() {
        let xml = r#"<Annotations><Annotation Id="1"><Attributes/><Regions>
            <RegionAttributeHeaders/>
            <Region Id="1"><Attributes/><Vertices>
              <Vertex X="1.5" Y="2" Z="0"/><Vertex X="4" Y="2"/><Vertex X="4" Y="6"/>
            </Vertices><Comments/></Region>
            <Region Id="2"><Vertices><Vertex X="1" Y="1"/><Vertex X="2" Y="2"/></Vertices></Region>
          </Regions><Plots/></Annotation></Annotations>"#;
        let p = parse_annotations(xml).unwrap();
        assert_eq!(
            p.set.polygons,
            vec![vec![(1.5, 2.0), (4.0, 2.0), (4.0, 6.0)]]
        );
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("region 2"));
    }

    #[test]
    fn malformed_documents_report_the_line() {
        let err =
            parse_annotations("<Annotations>\n<Regions>\n<Region>\n</Annotations>").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        let err = parse_annotations("<Regions>\n<Region><Vertices>\n<Vertex X=\"a\" Y=\"1\"/></Vertices></Region></Regions>")
            .unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
